"""Command-line entry point.

Exit codes: 0 success, 1 usage error (bad flags or out-of-range indices),
2 runtime or validation failure (missing/invalid files, failed checks).
Every output goes through a temp file and an atomic rename.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import kspace
from .engine import TapeError
from .io import FormatError, atomic_write, load_image, load_mtt, save_image, save_mtt, save_pgm
from .model import ConfigError, attention_maps
from .train import (TrainingDiverged, datasets, evaluate, load_checkpoint, load_config,
                    model_gradient_check, parse_matrix, predict, run_ablation, train)

log = logging.getLogger("mtrans")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    """Flag values that parse but are out of range for the given inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _json(obj) -> bytes:
    return (json.dumps(obj, indent=1) + "\n").encode()


# -- subcommands ------------------------------------------------------------------

def cmd_mask(args) -> int:
    mask = kspace.make_mask(args.kind, args.accel, args.width, args.seed, args.center_fraction)
    save_mtt(args.out, mask.columns)
    print(f"{args.out}: {mask.n_sampled}/{mask.width} columns ({mask.kind}, R={mask.acceleration}, "
          f"center fraction {mask.center_fraction})")
    return EXIT_OK


def cmd_degrade(args) -> int:
    img = np.asarray(load_image(args.inp))
    if np.iscomplexobj(img):
        img = np.abs(img)
    if img.ndim != 2:
        raise ValueError(f"{args.inp}: expected a 2-D image, got shape {img.shape}")
    y = kspace.fft2(img)
    if args.task == "recon":
        if args.mask is None:
            raise UsageError("--task recon needs --mask")
        cols = load_mtt(args.mask).reshape(-1) != 0
        out = kspace.zero_fill(kspace.undersample(y, cols))
    else:
        out = kspace.degrade_lr(y, args.scale)
    save_image(args.out, out)
    print(f"{args.out}: {out.shape[0]}x{out.shape[1]}")
    return EXIT_OK


def _load_cfg(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    return cfg.replace(**changes) if changes else cfg


def cmd_train(args) -> int:
    cfg = _load_cfg(args)

    def progress(step, loss):
        if step % args.log_every == 0:
            log.info("step %d loss %.6f", step, loss)

    report, _ = train(cfg, Path(args.out), progress)
    s = report.summary()
    print(f"{args.out}: loss {s['initial_train_loss']:.5f} -> {s['final_train_loss']:.5f}, "
          f"eval PSNR {s['metrics']['psnr']['mean']:.3f} dB")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, ckpt_cfg = load_checkpoint(args.ckpt)
    cfg = _load_cfg(args) if args.config else ckpt_cfg
    if cfg.model != ckpt_cfg.model:
        raise ValueError(f"{args.config}: model settings differ from checkpoint {args.ckpt}")
    _, eval_set = datasets(cfg)
    summary = evaluate(params, eval_set, cfg.model, jobs=args.jobs).as_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "eval.json", _json({"checkpoint": str(args.ckpt), "config": cfg.flat(),
                                           "metrics": summary}))
    print(" ".join(f"{k}={v['mean']:.5g}+-{v['std']:.3g}" for k, v in summary.items()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_cfg(args)
    report = model_gradient_check(cfg, n_coords=args.coords)
    print(report.summary())
    ok = report.passed(GRADCHECK_TOL)
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: worst {report.worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_ablate(args) -> int:
    path = Path(args.matrix)
    cells = parse_matrix(path.read_text(), str(path))
    if args.seed is not None:
        cells = {k: c.replace(seed=args.seed) for k, c in cells.items()}
    result = run_ablation(cells, Path(args.out), args.reference)
    print(result.table(), end="")
    return EXIT_OK


def cmd_attn(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    _, eval_set = datasets(cfg)
    m = cfg.model
    if not 0 <= args.sample < len(eval_set):
        raise UsageError(f"--sample {args.sample} out of range (0..{len(eval_set) - 1})")
    for flag, value, n in (("--stage", args.stage, m.n_enc), ("--head", args.head, m.heads)):
        if value is not None and not 0 <= value < n:
            raise UsageError(f"{flag} {value} out of range (0..{n - 1})")
    records = predict(params, eval_set[args.sample], m, capture=True).attention
    branch = "fused" if m.early else args.branch
    stages = [args.stage] if args.stage is not None else list(range(m.n_enc))
    heads = [args.head] if args.head is not None else list(range(m.heads))
    out = Path(args.out)
    if args.stage is not None and args.head is not None and out.suffix.lower() == ".pgm":
        save_pgm(out, attention_maps(records, args.head, args.stage, m, branch, args.query))
        print(out)
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    for k in stages:
        save_mtt(out / f"stage{k}_{branch}.mtt", records[k][branch])
        for j in heads:
            save_pgm(out / f"stage{k}_head{j}.pgm", attention_maps(records, j, k, m, branch, args.query))
    print(f"{out}: {len(stages) * len(heads)} maps")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtrans", description="Multi-modal transformer for accelerated MR imaging.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("mask", help="generate a Cartesian sampling mask (.mtt)")
    s.add_argument("--kind", choices=kspace.MASK_KINDS, required=True)
    s.add_argument("--accel", type=int, choices=sorted(kspace.CENTER_FRACTIONS), required=True)
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--center-fraction", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("degrade", help="zero-fill or k-space-truncate an image")
    s.add_argument("--task", choices=("recon", "sr"), required=True)
    s.add_argument("--in", dest="inp", required=True, help=".mtt or .pgm image")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--mask", help="column mask (.mtt) for --task recon")
    g.add_argument("--scale", type=int, help="truncation factor for --task sr")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("train", help="train on synthetic phantoms")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--log-every", type=int, default=20)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the held-out phantoms")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config", default=None, help="defaults to the checkpoint's own config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--coords", type=int, default=64, help="sampled coordinates per parameter")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="train every cell of an ablation matrix and compare")
    s.add_argument("--matrix", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--reference", default=None, help="cell to compare against (default: first)")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("attn", help="export attention heat maps (PGM) from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--sample", type=int, default=0, help="held-out sample index")
    s.add_argument("--stage", type=int, default=None, help="encoder index (default: all)")
    s.add_argument("--head", type=int, default=None, help="attention head (default: all)")
    s.add_argument("--branch", choices=("tar", "aux"), default="tar")
    s.add_argument("--query", type=int, default=None, help="query token (default: middle)")
    s.add_argument("--out", required=True, help=".pgm file for one stage/head, else a directory")
    s.set_defaults(func=cmd_attn)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        with threadpool_limits(1):
            return args.func(args)
    except UsageError as e:
        print(f"mtrans {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, ValueError, ConfigError, TapeError, TrainingDiverged) as e:
        print(f"mtrans {args.command}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
