"""The dual-branch multi-modal transformer.

Pipeline: conv heads -> patch tokens + learnable positions -> cascade of
cross transformer encoders -> conv tails. The target branch tiles its
feature map with half-size patches, the auxiliary branch with full-size
patches; each encoder first projects a branch's tokens to the other
branch's width so the two streams can share keys and values.

Parameters are a flat ordered ``dict[str, np.ndarray]``; ``forward`` binds
them to a tape when gradients are wanted.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import engine as E
from .engine import Tape, Tensor
from .rng import XorShift64Star

TASKS = ("reconstruction", "super_resolution")
VARIANTS = ("mtrans", "early_fusion", "single_scale_large", "single_scale_small")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MTransConfig:
    H: int = 32
    W: int = 32
    C: int = 16
    P: int = 16
    n_enc: int = 4
    heads: int = 4
    ffn_mult: int = 2
    task: str = "reconstruction"
    scale: int = 1
    alpha: float = 0.9
    eps_ln: float = 1e-5
    fusion_variant: str = "mtrans"

    def __post_init__(self):
        self.validate()

    # derived geometry -----------------------------------------------------
    @property
    def early(self) -> bool:
        return self.fusion_variant == "early_fusion"

    @property
    def p_tar(self) -> int:
        return self.P if self.fusion_variant == "single_scale_large" else self.P // 2

    @property
    def p_aux(self) -> int:
        return self.P // 2 if self.fusion_variant == "single_scale_small" else self.P

    @property
    def tar_hw(self) -> tuple[int, int]:
        """Spatial size of the target-branch feature map."""
        if self.early:
            return self.H, self.W
        return self.H // self.scale, self.W // self.scale

    @property
    def n_tar(self) -> int:
        h, w = self.tar_hw
        return (h // self.p_tar) * (w // self.p_tar)

    @property
    def n_aux(self) -> int:
        return (self.H // self.p_aux) * (self.W // self.p_aux)

    @property
    def d_tar(self) -> int:
        return self.p_tar ** 2 * self.C

    @property
    def d_aux(self) -> int:
        return self.p_aux ** 2 * self.C

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.fusion_variant not in VARIANTS:
            raise ConfigError(f"fusion_variant must be one of {VARIANTS}, got {self.fusion_variant!r}")
        if self.task == "reconstruction" and self.scale != 1:
            raise ConfigError("reconstruction uses scale 1")
        if self.scale < 1 or self.scale & (self.scale - 1):
            raise ConfigError(f"scale must be a power of two, got {self.scale}")
        if min(self.H, self.W, self.C, self.heads, self.ffn_mult) < 1 or self.n_enc < 0:
            raise ConfigError("sizes must be positive")
        if self.P < 2 or self.P % 2:
            raise ConfigError(f"patch side P must be even, got {self.P}")
        if self.H % self.scale or self.W % self.scale:
            raise ConfigError(f"scale {self.scale} does not divide {self.H}x{self.W}")
        th, tw = self.tar_hw
        if th % self.p_tar or tw % self.p_tar:
            raise ConfigError(f"target patch {self.p_tar} does not divide {th}x{tw}")
        if self.H % self.p_aux or self.W % self.p_aux:
            raise ConfigError(f"auxiliary patch {self.p_aux} does not divide {self.H}x{self.W}")
        for d in (self.d_tar,) if self.early else (self.d_tar, self.d_aux):
            if d % self.heads:
                raise ConfigError(f"token dim {d} not divisible by {self.heads} heads")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.eps_ln > 0:
            raise ConfigError("eps_ln must be positive")

    def as_dict(self) -> dict:
        return asdict(self)


# -- parameters -------------------------------------------------------------

def param_shapes(cfg: MTransConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor, in registry order."""
    C, m = cfg.C, cfg.ffn_mult
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, c_out, c_in, k):
        shapes[f"{name}.w"] = (c_out, c_in, k, k)
        shapes[f"{name}.b"] = (c_out,)

    def lin(name, d_in, d_out):
        shapes[f"{name}.w"] = (d_in, d_out)
        shapes[f"{name}.b"] = (d_out,)

    def norm(name, d):
        shapes[f"{name}.g"] = (d,)
        shapes[f"{name}.b"] = (d,)

    def branch_encoder(prefix, d_own, d_other, cross):
        if cross:
            lin(f"{prefix}.align", d_own, d_other)
        d = d_other if cross else d_own
        norm(f"{prefix}.ln_q", d)
        if cross:
            norm(f"{prefix}.ln_kv", d)
        # bias-free: a key bias only shifts each softmax row by a constant
        for proj in ("q", "k", "v"):
            shapes[f"{prefix}.{proj}.w"] = (d, d)
        lin(f"{prefix}.ca_out", d, d)
        norm(f"{prefix}.ln_ffn", d)
        lin(f"{prefix}.ffn1", d, m * d)
        lin(f"{prefix}.ffn2", m * d, d)
        lin(f"{prefix}.exit", d, d_own)

    branches = ("fused",) if cfg.early else ("tar", "aux")
    for b in branches:
        c_in = 2 if cfg.early else 1
        conv(f"head_{b}.conv0", C, c_in, 3)
        conv(f"head_{b}.conv1", C, C, 3)
        conv(f"head_{b}.conv2", C, C, 3)
    if cfg.early:
        shapes["pos_fused"] = (cfg.n_tar, cfg.d_tar)
    else:
        shapes["pos_tar"] = (cfg.n_tar, cfg.d_tar)
        shapes["pos_aux"] = (cfg.n_aux, cfg.d_aux)
    for i in range(cfg.n_enc):
        if cfg.early:
            branch_encoder(f"enc{i}.fused", cfg.d_tar, cfg.d_tar, cross=False)
        else:
            branch_encoder(f"enc{i}.tar", cfg.d_tar, cfg.d_aux, cross=True)
            branch_encoder(f"enc{i}.aux", cfg.d_aux, cfg.d_tar, cross=True)
    for b in branches:
        conv(f"tail_{b}.conv0", C, C, 3)
        conv(f"tail_{b}.conv1", C, C, 3)
        if cfg.early:
            c_out = 2
        elif b == "tar":
            c_out = cfg.scale ** 2
        else:
            c_out = 1
        conv(f"tail_{b}.conv2", c_out, C, 1)
    return shapes


def init_params(cfg: MTransConfig, seed: int, dtype=np.float64) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, unit norm gains, N(0, 0.02^2) positions."""
    rng = XorShift64Star(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        kind = name.rsplit(".", 1)[-1]
        if name.startswith("pos_"):
            v = rng.normal(n, std=0.02)
        elif kind == "w":
            if len(shape) == 4:
                rf = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * rf, shape[0] * rf
            else:
                fan_in, fan_out = shape
            a = math.sqrt(6.0 / (fan_in + fan_out))
            v = rng.uniform(n, -a, a)
        elif kind == "g":
            v = np.ones(n)
        else:
            v = np.zeros(n)
        params[name] = v.reshape(shape).astype(dtype)
    return params


def count_params(params: dict[str, np.ndarray]) -> int:
    return sum(v.size for v in params.values())


# -- building blocks ----------------------------------------------------------

def head_forward(img: Tensor, p: dict, branch: str) -> Tensor:
    """Three 3x3 convs with ReLU between; spatial size preserved."""
    x = img if img.data.ndim == 3 else E.reshape(img, (1, *img.shape))
    x = E.relu(E.conv2d(x, p[f"head_{branch}.conv0.w"], p[f"head_{branch}.conv0.b"]))
    x = E.relu(E.conv2d(x, p[f"head_{branch}.conv1.w"], p[f"head_{branch}.conv1.b"]))
    return E.conv2d(x, p[f"head_{branch}.conv2.w"], p[f"head_{branch}.conv2.b"])


def add_position(seq: Tensor, pos: Tensor) -> Tensor:
    return E.add(seq, pos)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                        capture: Optional[list] = None) -> Tensor:
    """softmax(Q K^T / sqrt(D/h)) V on each of the ``heads`` column slices."""
    D = q.shape[1]
    if k.shape[1] != D or v.shape != k.shape:
        raise E.ShapeError(f"query width {D} does not match keys {k.shape} / values {v.shape}")
    if D % heads:
        raise E.ShapeError(f"width {D} not divisible by {heads} heads")
    dh = D // heads
    inv = 1.0 / math.sqrt(dh)
    outs = []
    maps = []
    for j in range(heads):
        qj = E.slice_cols(q, j * dh, (j + 1) * dh)
        kj = E.slice_cols(k, j * dh, (j + 1) * dh)
        vj = E.slice_cols(v, j * dh, (j + 1) * dh)
        a = E.softmax_rows(E.scale(E.matmul(qj, E.transpose(kj)), inv))
        maps.append(a.data)
        outs.append(E.matmul(a, vj))
    if capture is not None:
        capture.append(np.stack(maps))
    return outs[0] if heads == 1 else E.concat_cols(outs)


def cross_attention(q_src: Tensor, kv_other: Optional[Tensor], p: dict, prefix: str,
                    heads: int, eps: float, capture: Optional[list] = None) -> Tensor:
    """One branch's cross attention module.

    Queries come from the normalized own tokens; keys and values from those
    rows stacked on top of the normalized other-branch tokens, each through
    its own linear projection. The result is ``LP(attention + LN(q_src))``.
    With ``kv_other=None`` it is plain self attention.
    """
    qn = E.layer_norm(q_src, p[f"{prefix}.ln_q.g"], p[f"{prefix}.ln_q.b"], eps)
    if kv_other is None:
        kv = qn
    else:
        if kv_other.shape[1] != q_src.shape[1]:
            raise E.ShapeError(
                f"{prefix}: aligned query width {q_src.shape[1]} != other-branch width {kv_other.shape[1]}")
        kn = E.layer_norm(kv_other, p[f"{prefix}.ln_kv.g"], p[f"{prefix}.ln_kv.b"], eps)
        kv = E.concat_rows(qn, kn)
    q = E.matmul(qn, p[f"{prefix}.q.w"])
    k = E.matmul(kv, p[f"{prefix}.k.w"])
    v = E.matmul(kv, p[f"{prefix}.v.w"])
    z_sa = multihead_attention(q, k, v, heads, capture)
    return E.linear(E.add(z_sa, qn), p[f"{prefix}.ca_out.w"], p[f"{prefix}.ca_out.b"])


def _ffn_exit(z_ca: Tensor, p: dict, prefix: str, eps: float) -> Tensor:
    h = E.layer_norm(z_ca, p[f"{prefix}.ln_ffn.g"], p[f"{prefix}.ln_ffn.b"], eps)
    h = E.relu(E.linear(h, p[f"{prefix}.ffn1.w"], p[f"{prefix}.ffn1.b"]))
    h = E.linear(h, p[f"{prefix}.ffn2.w"], p[f"{prefix}.ffn2.b"])
    return E.linear(E.add(h, z_ca), p[f"{prefix}.exit.w"], p[f"{prefix}.exit.b"])


def encoder_forward(z_tar: Tensor, z_aux: Tensor, p: dict, i: int, cfg: MTransConfig,
                    record: Optional[dict] = None) -> tuple[Tensor, Tensor]:
    """One cross transformer encoder stage; output shapes equal input shapes."""
    if z_tar.shape != (cfg.n_tar, cfg.d_tar) or z_aux.shape != (cfg.n_aux, cfg.d_aux):
        raise E.ShapeError(f"encoder {i}: got {z_tar.shape} / {z_aux.shape}, expected "
                           f"{(cfg.n_tar, cfg.d_tar)} / {(cfg.n_aux, cfg.d_aux)}")
    t, a = f"enc{i}.tar", f"enc{i}.aux"
    cap_t = [] if record is not None else None
    cap_a = [] if record is not None else None
    lp_tar = E.linear(z_tar, p[f"{t}.align.w"], p[f"{t}.align.b"])
    lp_aux = E.linear(z_aux, p[f"{a}.align.w"], p[f"{a}.align.b"])
    ca_tar = E.add(cross_attention(lp_tar, z_aux, p, t, cfg.heads, cfg.eps_ln, cap_t), lp_tar)
    ca_aux = E.add(cross_attention(lp_aux, z_tar, p, a, cfg.heads, cfg.eps_ln, cap_a), lp_aux)
    if record is not None:
        record["tar"] = cap_t[0]
        record["aux"] = cap_a[0]
    return _ffn_exit(ca_tar, p, t, cfg.eps_ln), _ffn_exit(ca_aux, p, a, cfg.eps_ln)


def fused_encoder_forward(z: Tensor, p: dict, i: int, cfg: MTransConfig,
                          record: Optional[dict] = None) -> Tensor:
    prefix = f"enc{i}.fused"
    cap = [] if record is not None else None
    ca = E.add(cross_attention(z, None, p, prefix, cfg.heads, cfg.eps_ln, cap), z)
    if record is not None:
        record["fused"] = cap[0]
    return _ffn_exit(ca, p, prefix, cfg.eps_ln)


def transformer_forward(z_tar: Tensor, z_aux: Tensor, p: dict, cfg: MTransConfig,
                        records: Optional[list] = None) -> tuple[Tensor, Tensor]:
    for i in range(cfg.n_enc):
        rec = {} if records is not None else None
        z_tar, z_aux = encoder_forward(z_tar, z_aux, p, i, cfg, rec)
        if records is not None:
            records.append(rec)
    return z_tar, z_aux


def tail_forward(seq: Tensor, p: dict, branch: str, cfg: MTransConfig) -> Tensor:
    """Unpatchify, then conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv1x1.

    The target tail of a super-resolution model emits scale^2 channels and
    rearranges them into one full-size image.
    """
    if branch == "aux":
        C, H, W, pp = cfg.C, cfg.H, cfg.W, cfg.p_aux
    else:
        (H, W), C, pp = cfg.tar_hw, cfg.C, cfg.p_tar
    x = E.unpatchify(seq, pp, C, H, W)
    x = E.relu(E.conv2d(x, p[f"tail_{branch}.conv0.w"], p[f"tail_{branch}.conv0.b"]))
    x = E.relu(E.conv2d(x, p[f"tail_{branch}.conv1.w"], p[f"tail_{branch}.conv1.b"]))
    x = E.conv2d(x, p[f"tail_{branch}.conv2.w"], p[f"tail_{branch}.conv2.b"])
    if branch == "tar" and cfg.scale > 1:
        x = E.pixel_shuffle(x, cfg.scale)
    if branch == "fused":
        return x
    return E.reshape(x, x.shape[1:])


@dataclass
class ForwardResult:
    x_tar: Tensor
    x_aux: Tensor
    attention: Optional[list] = field(default=None)


def _as_input(img, dtype, shape, what) -> Tensor:
    arr = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=dtype)
    if arr.shape != shape:
        raise E.ShapeError(f"{what} has shape {arr.shape}, expected {shape}")
    return Tensor(arr)


def mtrans_forward(target_input, aux_image, params: dict, cfg: MTransConfig,
                   tape: Optional[Tape] = None, capture: bool = False) -> ForwardResult:
    """Run the whole model on one sample.

    ``params`` is either a dict of arrays (bound to ``tape`` if given) or
    a dict of tensors already bound. With ``capture`` the per-stage
    attention matrices are returned as a list of ``{branch: (h, T_q, T_k)}``.
    """
    p = _bind(params, tape)
    dtype = next(iter(p.values())).dtype
    records = [] if capture else None
    x_aux_in = _as_input(aux_image, dtype, (cfg.H, cfg.W), "auxiliary image")
    if cfg.early:
        s = cfg.scale
        lr = _as_input(target_input, dtype, (cfg.H // s, cfg.W // s), "target input")
        # single-stream input: the low-resolution target is nearest-upsampled first
        x_tar_in = Tensor(np.repeat(np.repeat(lr.data, s, axis=0), s, axis=1)) if s > 1 else lr
        stacked = Tensor(np.stack([x_tar_in.data, x_aux_in.data]))
        f = head_forward(stacked, p, "fused")
        z = add_position(E.patchify(f, cfg.p_tar), p["pos_fused"])
        for i in range(cfg.n_enc):
            rec = {} if records is not None else None
            z = fused_encoder_forward(z, p, i, cfg, rec)
            if records is not None:
                records.append(rec)
        out = tail_forward(z, p, "fused", cfg)
        x_tar = E.reshape(_channel(out, 0), (cfg.H, cfg.W))
        x_aux = E.reshape(_channel(out, 1), (cfg.H, cfg.W))
        return ForwardResult(x_tar, x_aux, records)
    x_tar_in = _as_input(target_input, dtype, cfg.tar_hw, "target input")
    f_tar = head_forward(x_tar_in, p, "tar")
    f_aux = head_forward(x_aux_in, p, "aux")
    z_tar = add_position(E.patchify(f_tar, cfg.p_tar), p["pos_tar"])
    z_aux = add_position(E.patchify(f_aux, cfg.p_aux), p["pos_aux"])
    z_tar, z_aux = transformer_forward(z_tar, z_aux, p, cfg, records)
    return ForwardResult(tail_forward(z_tar, p, "tar", cfg), tail_forward(z_aux, p, "aux", cfg), records)


def _channel(x: Tensor, c: int) -> Tensor:
    n = x.shape[1] * x.shape[2]
    flat = E.reshape(x, (x.shape[0], n))
    return E.transpose(E.slice_cols(E.transpose(flat), c, c + 1))


def _bind(params: dict, tape: Optional[Tape]) -> dict:
    first = next(iter(params.values()))
    if isinstance(first, Tensor):
        return params
    if tape is not None:
        return tape.bind(params)
    return {k: Tensor(v) for k, v in params.items()}


def l1_loss(x_tar: Tensor, gt_tar, x_aux: Tensor, gt_aux, alpha: float) -> Tensor:
    """alpha * mean|x_tar - gt_tar| + (1 - alpha) * mean|x_aux - gt_aux| for one sample."""
    gt_tar = E.as_tensor(np.asarray(gt_tar, dtype=x_tar.dtype))
    gt_aux = E.as_tensor(np.asarray(gt_aux, dtype=x_aux.dtype))
    if x_tar.shape != gt_tar.shape or x_aux.shape != gt_aux.shape:
        raise E.ShapeError(f"loss: prediction/target shapes {x_tar.shape}/{gt_tar.shape}, "
                           f"{x_aux.shape}/{gt_aux.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    lt = E.mean(E.absolute(E.sub(x_tar, gt_tar)))
    la = E.mean(E.absolute(E.sub(x_aux, gt_aux)))
    return E.add(E.scale(lt, alpha), E.scale(la, 1.0 - alpha))


def loss(preds_tar, gts_tar, preds_aux, gts_aux, alpha: float) -> Tensor:
    """Batch objective: the per-sample loss averaged over the M samples."""
    terms = [l1_loss(pt, gt, pa, ga, alpha) for pt, gt, pa, ga in zip(preds_tar, gts_tar, preds_aux, gts_aux)]
    if not terms:
        raise ValueError("loss over an empty batch")
    acc = terms[0]
    for t in terms[1:]:
        acc = E.add(acc, t)
    return E.scale(acc, 1.0 / len(terms))


# -- attention maps -------------------------------------------------------------

def attention_maps(records: list, head: int, stage: int, cfg: MTransConfig,
                   branch: str = "tar", query: Optional[int] = None) -> np.ndarray:
    """Heat map of where one query token looks in the other branch.

    The query's attention over the other-branch key tokens (the trailing
    columns of its row) is laid out on that branch's tile grid, bilinearly
    resized to H x W and divided by its maximum.
    """
    if not 0 <= stage < len(records):
        raise IndexError(f"stage {stage} out of range (0..{len(records) - 1})")
    rec = records[stage]
    key = branch if branch in rec else next(iter(rec))
    attn = rec[key]
    if not 0 <= head < attn.shape[0]:
        raise IndexError(f"head {head} out of range (0..{attn.shape[0] - 1})")
    rows = attn[head]
    if query is None:
        query = rows.shape[0] // 2
    if key == "fused":
        grid_p, H, W = cfg.p_tar, cfg.H, cfg.W
        row = rows[query]
    else:
        other_p = cfg.p_aux if key == "tar" else cfg.p_tar
        H, W = (cfg.H, cfg.W) if key == "tar" else cfg.tar_hw
        grid_p = other_p
        n_other = (H // other_p) * (W // other_p)
        row = rows[query, -n_other:]
    grid = row.reshape(H // grid_p, W // grid_p)
    heat = bilinear_resize(grid, cfg.H, cfg.W)
    heat = np.clip(heat, 0.0, None)
    peak = heat.max()
    return heat / peak if peak > 0 else heat


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear interpolation with edge clamping."""
    gh, gw = grid.shape

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        return np.clip(c, 0, n_in - 1)

    ys, xs = coords(out_h, gh), coords(out_w, gw)
    rows = np.stack([np.interp(xs, np.arange(gw), grid[r]) for r in range(gh)])
    return np.stack([np.interp(ys, np.arange(gh), rows[:, c]) for c in range(out_w)], axis=1)
