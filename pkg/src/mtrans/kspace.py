"""Simulated Cartesian acquisition: centered orthonormal FFTs, column masks,
zero-filled reconstructions and k-space truncation.

All k-space arrays here are *centered*: the zero frequency sits at index
(H // 2, W // 2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CENTER_FRACTIONS = {4: 0.08, 6: 0.06, 8: 0.04}
MASK_KINDS = ("random", "equispaced")


class KSpaceError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_last(x: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized iterative radix-2 DFT along the last axis."""
    n = x.shape[-1]
    lead = x.shape[:-1]
    x = x[..., _bitrev(n)]
    sign = 1.0 if inverse else -1.0
    m = 1
    while m < n:
        w = np.exp(sign * 1j * np.pi * np.arange(m) / m)
        blocks = x.reshape(*lead, n // (2 * m), 2, m)
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * w
        x = np.stack([even + odd, even - odd], axis=-2).reshape(*lead, n)
        m *= 2
    return x


def _check_grid(x: np.ndarray) -> None:
    if x.ndim < 2:
        raise KSpaceError(f"expected an H x W grid, got shape {x.shape}")
    h, w = x.shape[-2:]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise KSpaceError(f"grid {h}x{w}: sides must be powers of two")


def _shift(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    return np.roll(x, (h // 2, w // 2), axis=(-2, -1))


def _fft2_raw(x: np.ndarray, inverse: bool) -> np.ndarray:
    y = _fft_last(x, inverse)
    y = np.swapaxes(_fft_last(np.swapaxes(y, -1, -2), inverse), -1, -2)
    h, w = x.shape[-2:]
    return y / math.sqrt(h * w)


def fft2(x: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2-D DFT of an image (or a stack of images)."""
    x = np.asarray(x, dtype=np.complex128)
    _check_grid(x)
    # for even sides ifftshift == fftshift == roll by half
    return _shift(_fft2_raw(_shift(x), inverse=False))


def ifft2(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.complex128)
    _check_grid(y)
    return _shift(_fft2_raw(_shift(y), inverse=True))


@dataclass(frozen=True)
class SamplingMask:
    columns: np.ndarray
    kind: str
    acceleration: int
    center_fraction: float
    seed: int

    @property
    def width(self) -> int:
        return self.columns.size

    @property
    def n_sampled(self) -> int:
        return int(self.columns.sum())

    def center_slice(self) -> slice:
        return center_block(self.width, self.center_fraction)


def center_block(width: int, center_fraction: float) -> slice:
    n = math.ceil(center_fraction * width - 1e-12)
    start = width // 2 - n // 2
    return slice(start, start + n)


def make_mask(kind: str, acceleration: int, width: int, seed: int,
              center_fraction: float | None = None) -> SamplingMask:
    """Cartesian column mask with ``width // acceleration`` sampled lines.

    The central block is always sampled; the rest of the budget is spread
    uniformly at random (``random``) or at even spacing with a seeded phase
    (``equispaced``).
    """
    if kind not in MASK_KINDS:
        raise KSpaceError(f"unknown mask kind {kind!r}")
    if acceleration < 2:
        raise KSpaceError(f"acceleration must be >= 2, got {acceleration}")
    if center_fraction is None:
        if acceleration not in CENTER_FRACTIONS:
            raise KSpaceError(f"no default center fraction for acceleration {acceleration}")
        center_fraction = CENTER_FRACTIONS[acceleration]
    if not 0 < center_fraction < 1 or center_fraction * width < 1:
        raise KSpaceError(f"center fraction {center_fraction} leaves no central column at width {width}")
    center = center_block(width, center_fraction)
    n_center = center.stop - center.start
    budget = width // acceleration
    if 1.0 / acceleration <= center_fraction or budget <= n_center:
        raise KSpaceError(
            f"budget of {budget} lines (1/{acceleration} of {width}) does not exceed "
            f"the {n_center}-line center block")
    cols = np.zeros(width, dtype=bool)
    cols[center] = True
    free = np.flatnonzero(~cols)
    k = budget - n_center
    rng = np.random.default_rng(seed)
    if kind == "random":
        pick = rng.choice(free, size=k, replace=False)
    else:
        step = free.size / k
        phase = int(rng.integers(0, max(1, int(step))))
        pick = free[(np.floor(np.arange(k) * step).astype(int) + phase) % free.size]
    cols[pick] = True
    return SamplingMask(cols, kind, acceleration, center_fraction, seed)


def undersample(y: np.ndarray, mask: SamplingMask | np.ndarray) -> np.ndarray:
    """Zero the k-space columns the mask does not sample."""
    cols = mask.columns if isinstance(mask, SamplingMask) else np.asarray(mask, dtype=bool)
    if cols.shape != (y.shape[-1],):
        raise KSpaceError(f"mask width {cols.shape} does not match k-space width {y.shape[-1]}")
    return y * cols


def zero_fill(y_hat: np.ndarray) -> np.ndarray:
    return np.abs(ifft2(y_hat))


def truncate(y: np.ndarray, s: int) -> np.ndarray:
    """Central (H/s) x (W/s) block of centered k-space."""
    if s < 1 or not _is_pow2(s):
        raise KSpaceError(f"scale factor must be a power of two, got {s}")
    h, w = y.shape[-2:]
    if h % s or w % s:
        raise KSpaceError(f"scale {s} does not divide {h}x{w}")
    hs, ws = h // s, w // s
    r0, c0 = h // 2 - hs // 2, w // 2 - ws // 2
    return y[..., r0:r0 + hs, c0:c0 + ws]


def lowres_complex(y: np.ndarray, s: int) -> np.ndarray:
    """Complex low-resolution image from truncated k-space.

    Orthonormal transforms at both sizes scale intensities by ``s``: a
    constant image c becomes the constant c * s.
    """
    return ifft2(truncate(np.asarray(y, dtype=np.complex128), s))


def degrade_lr(y: np.ndarray, s: int) -> np.ndarray:
    return np.abs(lowres_complex(y, s))


def normalize(img: np.ndarray) -> tuple[np.ndarray, float]:
    """Divide by the maximum; returns (image, max)."""
    img = np.asarray(img, dtype=np.float64)
    peak = float(img.max())
    if not peak > 0:
        raise KSpaceError("cannot normalize an image whose maximum is not positive")
    return img / peak, peak


def upsample_nearest(img: np.ndarray, s: int) -> np.ndarray:
    return np.repeat(np.repeat(img, s, axis=-2), s, axis=-1)
