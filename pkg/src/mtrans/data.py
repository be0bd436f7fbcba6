"""Synthetic paired-modality phantoms and the degraded training samples.

Phantoms are randomized Shepp-Logan-style ellipse stacks: the first ellipse
is the head (its interior is the object support), the second a darker
brain region inside it, the rest small structures with random signed
intensities. Modality A is the additive ellipse field, clipped at 0 and
normalized to a peak of 1. Modality B reuses the same geometry with
inverted contrast inside the support S:

    B = S * clip(1 - 0.7 * A + 0.3 * A * g, 0, 1)

where ``g`` is a seeded smooth (planar) field in [0, 1], so the second
modality has its own intensity statistics while edges coincide and the
background stays dark in both.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kspace
from .io import load_mtt

AUX_MODES = ("paired", "noise", "self")
MASK_KINDS = kspace.MASK_KINDS + ("full",)


@dataclass(frozen=True)
class SyntheticPhantomSpec:
    H: int = 32
    W: int = 32
    ellipses: tuple[int, int] = (3, 8)
    seed: int = 0


@dataclass
class DegradedSample:
    task: str
    target_input: np.ndarray
    aux_image: np.ndarray
    target_gt: np.ndarray
    index: int
    stats: dict = field(default_factory=dict)


def _ellipse(xs, ys, cx, cy, ax, ay, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xs - cx) * c + (ys - cy) * s
    v = -(xs - cx) * s + (ys - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _phantom(H: int, W: int, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """(ellipse field, head support) with ``n`` ellipses in total."""
    ys, xs = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    field = np.zeros((H, W))
    support = np.zeros((H, W), dtype=bool)
    if n == 0:
        return field, support
    hx, hy = rng.uniform(0.6, 0.75), rng.uniform(0.75, 0.92)
    tilt = rng.uniform(-0.2, 0.2)
    support = _ellipse(xs, ys, 0.0, 0.0, hx, hy, tilt)
    field += support
    if n >= 2:
        field -= rng.uniform(0.5, 0.7) * _ellipse(xs, ys, 0.0, 0.02, 0.92 * hx, 0.92 * hy, tilt)
    for _ in range(n - 2):
        cx, cy = rng.uniform(-0.45, 0.45) * hx, rng.uniform(-0.55, 0.55) * hy
        ax, ay = rng.uniform(0.08, 0.35, size=2)
        theta = rng.uniform(0, np.pi)
        field += rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.4) * _ellipse(xs, ys, cx, cy, ax, ay, theta)
    return np.clip(field, 0.0, None), support


def make_synthetic_pair(spec: SyntheticPhantomSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (A, B) pair for ``(spec.seed, index)``, both in [0, 1]."""
    rng = np.random.default_rng([spec.seed, index])
    lo, hi = spec.ellipses
    n = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    a, support = _phantom(spec.H, spec.W, rng, n)
    peak = a.max()
    if peak > 0:
        a = a / peak
    gy, gx = rng.uniform(-0.5, 0.5, size=2)
    ys, xs = np.meshgrid(np.linspace(-1, 1, spec.H), np.linspace(-1, 1, spec.W), indexing="ij")
    g = 0.5 * (1.0 + gy * ys + gx * xs)
    b = support * np.clip(1.0 - 0.7 * a + 0.3 * a * g, 0.0, 1.0)
    return a, b


def gradient_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of the gradient-magnitude maps of two images."""
    ga = np.hypot(*np.gradient(a))
    gb = np.hypot(*np.gradient(b))
    if ga.std() == 0 or gb.std() == 0:
        return 0.0
    return float(np.corrcoef(ga.ravel(), gb.ravel())[0, 1])


def degrade(b: np.ndarray, task: str, *, mask: Optional[kspace.SamplingMask | np.ndarray] = None,
            scale: int = 1) -> np.ndarray:
    """Zero-filled (reconstruction) or k-space-truncated (super-resolution) magnitude image."""
    y = kspace.fft2(b)
    if task == "reconstruction":
        if mask is None:
            raise ValueError("reconstruction needs a sampling mask")
        return kspace.zero_fill(kspace.undersample(y, mask))
    if task == "super_resolution":
        return kspace.degrade_lr(y, scale)
    raise ValueError(f"unknown task {task!r}")


def _mask_for(kind: str, accel: int, width: int, center_fraction: Optional[float], seed: int):
    if kind == "full":
        return np.ones(width, dtype=bool)
    return kspace.make_mask(kind, accel, width, seed, center_fraction)


def build_dataset(n: int, task: str, spec: SyntheticPhantomSpec, *, aux_mode: str = "paired",
                  mask_kind: str = "random", accel: int = 4, center_fraction: Optional[float] = None,
                  scale: int = 1, start_index: int = 0) -> list[DegradedSample]:
    """Degrade modality B of ``n`` synthetic pairs; modality A guides it.

    Sample ``i`` uses phantom index ``start_index + i``. Every image is
    divided by its own maximum. ``aux_mode`` swaps the auxiliary image for
    seeded uniform noise (``noise``) or for the degraded target itself,
    nearest-upsampled to full size (``self``).
    """
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    if aux_mode not in AUX_MODES:
        raise ValueError(f"aux_mode must be one of {AUX_MODES}, got {aux_mode!r}")
    if mask_kind not in MASK_KINDS:
        raise ValueError(f"mask kind must be one of {MASK_KINDS}, got {mask_kind!r}")
    out = []
    for i in range(n):
        idx = start_index + i
        a, b = make_synthetic_pair(spec, idx)
        mask_seed = int(np.random.default_rng([spec.seed, idx, 1]).integers(2 ** 62))
        if task == "reconstruction":
            mask = _mask_for(mask_kind, accel, spec.W, center_fraction, mask_seed)
            raw = degrade(b, task, mask=mask)
            s = 1
        else:
            raw = degrade(b, task, scale=scale)
            s = scale
        tin, tin_max = kspace.normalize(raw)
        gt, gt_max = kspace.normalize(b)
        if aux_mode == "paired":
            aux = a
        elif aux_mode == "noise":
            aux = np.random.default_rng([spec.seed, idx, 2]).uniform(0.0, 1.0, size=(spec.H, spec.W))
        else:
            aux = kspace.upsample_nearest(tin, s)
        out.append(DegradedSample(task, tin, aux, gt, idx,
                                  {"target_input_max": tin_max, "target_gt_max": gt_max}))
    return out


def load_volume_pair(target_path: str | Path, aux_path: str | Path) -> list[tuple[np.ndarray, np.ndarray]]:
    """Slices of two co-registered ``.mtt`` volumes ([S, H, W], real or complex).

    Returns (aux magnitude, target magnitude) pairs normalized to [0, 1],
    ready to stand in for :func:`make_synthetic_pair` output.
    """
    tv = np.abs(load_mtt(target_path))
    av = np.abs(load_mtt(aux_path))
    if tv.ndim == 2:
        tv, av = tv[None], av[None]
    if tv.shape != av.shape or tv.ndim != 3:
        raise ValueError(f"volumes must share an [S, H, W] shape, got {tv.shape} and {av.shape}")
    pairs = []
    for t, a in zip(tv, av):
        pairs.append((a / a.max() if a.max() > 0 else a, t / t.max() if t.max() > 0 else t))
    return pairs
