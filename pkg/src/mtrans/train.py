"""Training, evaluation, checkpoints and the ablation runner.

Seed fan-out: a run's single ``seed`` feeds three sub-streams through
:func:`mtrans.rng.sub_seed` -- stream 1 initializes the weights, stream 2
orders the mini-batches and stream 3 generates the synthetic data (phantoms,
masks, noise). Cells of an ablation that share a seed therefore see the same
data, the same batches and the same starting weights.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import engine as E
from .data import AUX_MODES, MASK_KINDS, DegradedSample, SyntheticPhantomSpec, build_dataset
from .engine import GradCheckReport, Tape, grad_check
from .io import FormatError, atomic_write, decode_mtt, encode_mtt, format_kv, parse_kv
from .metrics import MetricSummary, paired_t_test
from .model import MTransConfig, l1_loss, init_params, mtrans_forward, param_shapes
from .rng import sub_seed

log = logging.getLogger(__name__)

INIT_STREAM, ORDER_STREAM, DATA_STREAM = 1, 2, 3
EVAL_START = 1_000_000


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: MTransConfig = field(default_factory=MTransConfig)
    lr: float = 1e-4
    batch_size: int = 4
    steps: int = 200
    dataset_size: int = 8
    eval_size: int = 8
    seed: int = 0
    aux_mode: str = "paired"
    mask_kind: str = "random"
    accel: int = 4
    center_fraction: float = 0.0  # 0 -> default for the acceleration
    ellipses_min: int = 3
    ellipses_max: int = 8
    precision: str = "float64"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 1 <= self.batch_size <= self.dataset_size:
            raise ValueError(f"batch size {self.batch_size} must be in 1..dataset_size ({self.dataset_size})")
        if self.steps < 0 or self.eval_size < 1:
            raise ValueError("steps must be >= 0 and eval_size >= 1")
        if self.aux_mode not in AUX_MODES:
            raise ValueError(f"aux_mode must be one of {AUX_MODES}")
        if self.mask_kind not in MASK_KINDS:
            raise ValueError(f"mask_kind must be one of {MASK_KINDS}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if not 0 <= self.ellipses_min <= self.ellipses_max:
            raise ValueError("need 0 <= ellipses_min <= ellipses_max")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    @property
    def seeds(self) -> dict[str, int]:
        return {"seed": self.seed, "init": sub_seed(self.seed, INIT_STREAM),
                "order": sub_seed(self.seed, ORDER_STREAM), "data": sub_seed(self.seed, DATA_STREAM)}

    def phantom_spec(self) -> SyntheticPhantomSpec:
        return SyntheticPhantomSpec(self.model.H, self.model.W, (self.ellipses_min, self.ellipses_max),
                                    self.seeds["data"])

    def flat(self) -> dict:
        out = dict(self.model.as_dict())
        for f in dataclasses.fields(self):
            if f.name != "model":
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_flat(cls, items: dict[str, str]) -> "TrainConfig":
        """Build from string values; unknown keys are errors."""
        mfields = {f.name: f for f in dataclasses.fields(MTransConfig)}
        tfields = {f.name: f for f in dataclasses.fields(cls) if f.name != "model"}
        mkw, tkw = {}, {}
        for key, raw in items.items():
            if key in mfields:
                mkw[key] = _coerce(mfields[key], raw)
            elif key in tfields:
                tkw[key] = _coerce(tfields[key], raw)
            else:
                raise FormatError(f"unknown config key {key!r}")
        return cls(model=MTransConfig(**mkw), **tkw)

    def replace(self, **changes) -> "TrainConfig":
        flat = {k: str(v) for k, v in self.flat().items()}
        flat.update({k: str(v) for k, v in changes.items()})
        return TrainConfig.from_flat(flat)


def _coerce(f: dataclasses.Field, raw):
    if not isinstance(raw, str):
        return raw
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise FormatError(f"{f.name}: cannot parse {raw!r} as {kind}") from None
    return raw


def load_config(path) -> TrainConfig:
    path = Path(path)
    return TrainConfig.from_flat(parse_kv(path.read_text(), str(path)))


def dump_config(cfg: TrainConfig) -> str:
    return format_kv(cfg.flat())


# -- data ---------------------------------------------------------------------

def datasets(cfg: TrainConfig) -> tuple[list[DegradedSample], list[DegradedSample]]:
    m = cfg.model
    kw = dict(aux_mode=cfg.aux_mode, mask_kind=cfg.mask_kind, accel=cfg.accel,
              center_fraction=cfg.center_fraction or None, scale=m.scale)
    spec = cfg.phantom_spec()
    return (build_dataset(cfg.dataset_size, m.task, spec, start_index=0, **kw),
            build_dataset(cfg.eval_size, m.task, spec, start_index=EVAL_START, **kw))


# -- optimisation ---------------------------------------------------------------

def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """Plain SGD, p <- p - lr * g. Returns new arrays."""
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        out[name] = p - p.dtype.type(lr) * g
    return out


def sample_loss_and_grads(params: dict, sample: DegradedSample, cfg: MTransConfig,
                          dtype=np.float64) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape(dtype=dtype)
    res = mtrans_forward(sample.target_input, sample.aux_image, params, cfg, tape)
    loss = l1_loss(res.x_tar, sample.target_gt, res.x_aux, sample.aux_image, cfg.alpha)
    return loss.item(), E.backward(tape, loss)


def sample_loss(params: dict, sample: DegradedSample, cfg: MTransConfig) -> float:
    res = mtrans_forward(sample.target_input, sample.aux_image, params, cfg)
    return l1_loss(res.x_tar, sample.target_gt, res.x_aux, sample.aux_image, cfg.alpha).item()


def dataset_loss(params: dict, samples: list[DegradedSample], cfg: MTransConfig) -> float:
    return float(np.mean([sample_loss(params, s, cfg) for s in samples]))


def batch_order(n: int, batch: int, steps: int, seed: int) -> list[list[int]]:
    """Mini-batches drawn from a stream of seeded epoch permutations."""
    rng = np.random.default_rng(seed)
    stream: list[int] = []
    out = []
    for _ in range(steps):
        while len(stream) < batch:
            stream.extend(int(i) for i in rng.permutation(n))
        out.append(stream[:batch])
        stream = stream[batch:]
    return out


@dataclass
class TrainReport:
    losses: list[float]
    initial_train_loss: float
    final_train_loss: float
    metrics: dict
    config: dict
    seeds: dict
    n_params: int
    wall_clock: float = 0.0

    def summary(self) -> dict:
        """Machine-readable summary; wall-clock is left out so reruns match byte for byte."""
        return {
            "config": self.config,
            "seeds": self.seeds,
            "n_params": self.n_params,
            "steps": len(self.losses),
            "initial_train_loss": self.initial_train_loss,
            "final_train_loss": self.final_train_loss,
            "loss_ratio": (self.final_train_loss / self.initial_train_loss
                           if self.initial_train_loss > 0 else math.nan),
            "losses": self.losses,
            "metrics": self.metrics,
        }

    def log_text(self) -> str:
        lines = [f"# seed={self.seeds['seed']} params={self.n_params}",
                 f"initial_train_loss={self.initial_train_loss!r}"]
        lines += [f"step={i + 1} loss={v!r}" for i, v in enumerate(self.losses)]
        lines.append(f"final_train_loss={self.final_train_loss!r}")
        for name in ("psnr", "ssim", "nmse"):
            m = self.metrics[name]
            lines.append(f"eval {name} mean={m['mean']!r} std={m['std']!r}")
        return "\n".join(lines) + "\n"


def _param_norms(params: dict) -> str:
    return ", ".join(f"{k}={float(np.linalg.norm(v)):.3e}" for k, v in params.items())


def train(cfg: TrainConfig, out_dir: Optional[Path] = None,
          progress: Optional[Callable[[int, float], None]] = None) -> tuple[TrainReport, dict]:
    """Train from the config's seed; returns (report, final parameters).

    With ``out_dir`` the log, summary and final checkpoint are written there.
    """
    t0 = time.perf_counter()
    m = cfg.model
    seeds = cfg.seeds
    params = init_params(m, seeds["init"], cfg.dtype)
    train_set, eval_set = datasets(cfg)
    initial = dataset_loss(params, train_set, m)
    losses: list[float] = []
    for step, batch in enumerate(batch_order(len(train_set), cfg.batch_size, cfg.steps, seeds["order"])):
        acc = None
        total = 0.0
        for i in batch:
            loss_i, g = sample_loss_and_grads(params, train_set[i], m, cfg.dtype)
            total += loss_i
            if acc is None:
                acc = g
            else:
                for k in acc:
                    acc[k] += g[k]
        batch_loss = total / len(batch)
        if not math.isfinite(batch_loss):
            raise TrainingDiverged(f"non-finite loss {batch_loss} at step {step + 1}; "
                                   f"parameter norms: {_param_norms(params)}")
        losses.append(batch_loss)
        inv = 1.0 / len(batch)
        params = sgd_step(params, {k: v * inv for k, v in acc.items()}, cfg.lr)
        if progress is not None:
            progress(step + 1, batch_loss)
    final = dataset_loss(params, train_set, m)
    metrics = evaluate(params, eval_set, m).as_dict()
    report = TrainReport(losses, initial, final, metrics, cfg.flat(), seeds,
                         sum(v.size for v in params.values()))
    report.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        write_run(Path(out_dir), report, params, cfg)
    return report, params


def write_run(out_dir: Path, report: TrainReport, params: dict, cfg: TrainConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write(out_dir / "train.log", report.log_text().encode())
    atomic_write(out_dir / "report.json", (json.dumps(report.summary(), indent=1) + "\n").encode())
    save_checkpoint(out_dir / "model.ckpt", params, cfg)
    atomic_write(out_dir / "timing.txt", f"wall_clock_seconds={report.wall_clock:.3f}\n".encode())


# -- evaluation -------------------------------------------------------------------

def predict(params: dict, sample: DegradedSample, cfg: MTransConfig, capture: bool = False):
    return mtrans_forward(sample.target_input, sample.aux_image, params, cfg, capture=capture)


def evaluate(params: dict, samples: list[DegradedSample], cfg: MTransConfig, jobs: int = 1) -> MetricSummary:
    """PSNR/SSIM/NMSE of the target output against ground truth, per sample."""
    for name, shape in param_shapes(cfg).items():
        if name not in params or params[name].shape != shape:
            raise ValueError(f"parameter {name} missing or mis-shaped for this config")

    def one(s):
        return predict(params, s, cfg).x_tar.data

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outs = list(pool.map(one, samples))
    else:
        outs = [one(s) for s in samples]
    summary = MetricSummary()
    for s, x in zip(samples, outs):
        summary.add(x, s.target_gt)
    return summary


# -- gradient check -------------------------------------------------------------

def model_gradient_check(cfg: TrainConfig, n_coords: int = 64, jitter: float = 0.05,
                         eps: float = 1e-5) -> GradCheckReport:
    """Finite-difference check of the full loss on the first training sample.

    Freshly initialized biases and norm shifts are all zero, which hides
    bugs in their gradients, so every non-weight parameter is perturbed by
    N(0, jitter^2) first (seeded from the run seed).
    """
    if cfg.precision != "float64":
        raise ValueError("gradient check needs precision = float64")
    m = cfg.model
    params = init_params(m, cfg.seeds["init"], np.float64)
    rng = np.random.default_rng(cfg.seeds["init"])
    for name in params:
        if not name.endswith(".w") and not name.startswith("pos_"):
            params[name] = params[name] + rng.normal(0.0, jitter, params[name].shape)
    sample = datasets(cfg)[0][0]
    _, grads = sample_loss_and_grads(params, sample, m, np.float64)
    return grad_check(lambda q: sample_loss(q, sample, m), params, grads, eps=eps,
                      n_coords=n_coords, seed=cfg.seed)


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, params: dict, cfg: TrainConfig) -> None:
    """Text manifest at ``path`` plus one ``.mtt`` blob next to it."""
    path = Path(path)
    blob_path = path.with_suffix(".mtt")
    dtype = np.dtype(cfg.dtype)
    items = {f"config.{k}": v for k, v in cfg.flat().items()}
    items["blob"] = blob_path.name
    offset = 0
    for name, v in params.items():
        items[f"param.{name}"] = f"{offset} {'x'.join(map(str, v.shape))} {dtype.name}"
        offset += v.size
    flat = np.concatenate([v.astype(dtype).ravel() for v in params.values()])
    atomic_write(blob_path, encode_mtt(flat))
    atomic_write(path, format_kv(items).encode())


def load_checkpoint(path, expect: Optional[MTransConfig] = None) -> tuple[dict, TrainConfig]:
    """Read a checkpoint, validating every shape against its (or ``expect``'s) config."""
    path = Path(path)
    items = parse_kv(path.read_text(), str(path))
    cfg = TrainConfig.from_flat({k[7:]: v for k, v in items.items() if k.startswith("config.")})
    model = cfg.model
    if expect is not None and expect != model:
        raise ValueError(f"checkpoint model config {model} differs from expected {expect}")
    blob = decode_mtt((path.parent / items["blob"]).read_bytes())
    shapes = param_shapes(model)
    entries = {k[6:]: v for k, v in items.items() if k.startswith("param.")}
    if set(entries) != set(shapes):
        missing = set(shapes) ^ set(entries)
        raise ValueError(f"checkpoint parameters do not match config: {sorted(missing)[:5]}")
    params = {}
    for name, shape in shapes.items():
        off_s, shape_s, _ = entries[name].split()
        got = tuple(int(d) for d in shape_s.split("x"))
        if got != shape:
            raise ValueError(f"{name}: checkpoint shape {got} != config shape {shape}")
        off, n = int(off_s), int(np.prod(shape))
        if off + n > blob.size:
            raise ValueError(f"{name}: blob too short")
        params[name] = np.array(blob[off:off + n], dtype=cfg.dtype).reshape(shape)
    return params, cfg


# -- ablation ---------------------------------------------------------------------------

def parse_matrix(text: str, source: str = "<matrix>") -> dict[str, TrainConfig]:
    """Shared ``key = value`` lines, then ``[cell]`` sections overriding them."""
    base: list[str] = []
    sections: dict[str, list[str]] = {}
    current = base
    for line in text.splitlines():
        stripped = line.split("#", 1)[0].strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            name = stripped[1:-1].strip()
            if not name or name in sections:
                raise FormatError(f"{source}: bad or duplicate cell name {name!r}")
            current = sections[name] = []
        else:
            current.append(line)
    if not sections:
        raise FormatError(f"{source}: no [cell] sections")
    shared = parse_kv("\n".join(base), source)
    cells = {}
    for name, lines in sections.items():
        items = dict(shared)
        items.update(parse_kv("\n".join(lines), f"{source}[{name}]"))
        cells[name] = TrainConfig.from_flat(items)
    return cells


@dataclass
class AblationReport:
    reports: dict[str, TrainReport]
    comparisons: dict[str, dict]
    reference: str

    def summary(self) -> dict:
        return {"reference": self.reference,
                "cells": {k: r.summary() for k, r in self.reports.items()},
                "comparisons": self.comparisons}

    def table(self) -> str:
        lines = [f"{'cell':<24s} {'psnr':>9s} {'ssim':>8s} {'nmse':>9s} {'loss':>9s}"
                 f" {'dpsnr':>8s} {'p(psnr)':>9s}"]
        for name, r in self.reports.items():
            m = r.metrics
            c = self.comparisons.get(name, {}).get("psnr", {})
            lines.append(f"{name:<24s} {m['psnr']['mean']:9.3f} {m['ssim']['mean']:8.4f} "
                         f"{m['nmse']['mean']:9.5f} {r.final_train_loss:9.5f} "
                         f"{c.get('mean_diff', 0.0):8.3f} {c.get('p', 1.0):9.3g}")
        return "\n".join(lines) + "\n"


def compare(a: MetricSummary | dict, b: MetricSummary | dict) -> dict:
    """Paired per-sample differences (a - b) and t-tests for each metric."""
    da = a.as_dict() if isinstance(a, MetricSummary) else a
    db = b.as_dict() if isinstance(b, MetricSummary) else b
    out = {}
    for name in ("psnr", "ssim", "nmse"):
        va = np.asarray(da[name]["values"], dtype=np.float64)
        vb = np.asarray(db[name]["values"], dtype=np.float64)
        diffs = va - vb
        res = paired_t_test(va, vb)
        out[name] = {"diffs": [float(d) for d in diffs], "mean_diff": res.mean_diff,
                     "t": res.t, "p": res.p, "degenerate": res.degenerate}
    return out


def run_ablation(cells: dict[str, TrainConfig], out_dir: Optional[Path] = None,
                 reference: Optional[str] = None) -> AblationReport:
    """Train every cell and compare each against the reference (first) cell."""
    names = list(cells)
    if not names:
        raise ValueError("empty ablation matrix")
    ref = reference or names[0]
    keys = ("seed", "dataset_size", "eval_size", "mask_kind", "accel", "center_fraction",
            "ellipses_min", "ellipses_max")
    first = cells[ref]
    for name, c in cells.items():
        for k in keys:
            if getattr(c, k) != getattr(first, k):
                raise ValueError(f"cell {name!r} differs from {ref!r} in {k}; cells must share data seeds")
    reports = {}
    for name, c in cells.items():
        log.info("ablation cell %s", name)
        sub = Path(out_dir) / name if out_dir is not None else None
        reports[name], _ = train(c, sub)
    comparisons = {name: compare(reports[name].metrics, reports[ref].metrics)
                   for name in names if name != ref}
    result = AblationReport(reports, comparisons, ref)
    if out_dir is not None:
        out_dir = Path(out_dir)
        atomic_write(out_dir / "ablation.json", (json.dumps(result.summary(), indent=1) + "\n").encode())
        atomic_write(out_dir / "ablation.txt", result.table().encode())
    return result
