"""Differentiable ops over :class:`Tensor`.

Every op computes its forward result with numpy and, when an input is on a
tape, records a vector-Jacobian product closure. Broadcasting is limited to
a bias vector over rows.
"""
from __future__ import annotations

import contextlib
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, tape_of


class ShapeError(ValueError):
    pass


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    tape = tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(op, inputs, out, vjp)


# -- kink monitoring --------------------------------------------------------

_monitor: Optional[list] = None


@contextlib.contextmanager
def kink_monitor():
    """Collect the sign pattern of every relu/abs argument evaluated inside."""
    global _monitor
    prev, _monitor = _monitor, []
    try:
        yield _monitor
    finally:
        _monitor = prev


def _watch(x: np.ndarray) -> None:
    if _monitor is not None:
        _monitor.append(np.sign(x).astype(np.int8))


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., j] + b[j]."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _emit("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=axes)))


def relu(x: Tensor) -> Tensor:
    _watch(x.data)
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def absolute(x: Tensor) -> Tensor:
    _watch(x.data)
    # subgradient at zero is 0
    s = np.sign(x.data)
    return _emit("abs", (x,), np.abs(x.data), lambda g: (g * s,))


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    inv = x.dtype.type(1.0 / n)
    return _emit("mean", (x,), np.asarray(x.data.sum() * inv),
                 lambda g: (np.full(shape, g.reshape(()) * inv, dtype=x.dtype),))


# -- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return _emit("reshape", (x,), out, lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _emit("transpose", (x,), out, lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: trailing dims of {a.shape} and {b.shape} differ")
    n = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return _emit("concat_rows", (a, b), out, lambda g: (g[:n], g[n:]))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].shape[0]
    if any(p.data.ndim != 2 or p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    cuts = np.cumsum([p.shape[1] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=1)
    return _emit("concat_cols", tuple(parts), out, lambda g: tuple(np.split(g, cuts, axis=1)))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_cols", (x,), x.data[:, start:stop].copy(), vjp)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    cuts = np.cumsum([p.shape[0] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=0)
    return _emit("concat_channels", tuple(parts), out, lambda g: tuple(np.split(g, cuts, axis=0)))


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b, with the bias broadcast over rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape} do not conform")
    return add_bias(matmul(x, w), b)


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", (x,), y, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise standardization with population variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g):
        gx = g * gd
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("layer_norm", (x, gain, bias), out, vjp)


# -- convolution ------------------------------------------------------------

def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-padded cross-correlation of a [c_in, H, W] map with [c_out, c_in, k, k] kernels."""
    c_out, c_in, k, k2 = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if x.data.ndim != 3 or x.shape[0] != c_in:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernels {kernels.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {c_out} output channels")
    _, H, W = x.shape
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))  # c_in, H, W, k, k
    kd = kernels.data
    out = np.tensordot(kd, cols, axes=([1, 2, 3], [0, 3, 4])) + bias.data[:, None, None]

    def vjp(g):
        dk = np.tensordot(g, cols, axes=([1, 2], [1, 2]))  # c_out, c_in, k, k
        dcols = np.tensordot(kd, g, axes=([0], [0]))  # c_in, k, k, H, W
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + H, j:j + W] += dcols[:, i, j]
        return dxp[:, pad:pad + H, pad:pad + W], dk, g.sum(axis=(1, 2))

    return _emit("conv2d", (x, kernels, bias), out, vjp)


# -- rearrangements ---------------------------------------------------------

def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: [c*r*r, H, W] -> [c, r*H, r*W]."""
    cr, H, W = x.shape
    if cr % (r * r):
        raise ShapeError(f"pixel_shuffle: {cr} channels not divisible by r^2={r * r}")
    c = cr // (r * r)
    y = reshape(x, (c, r, r, H, W))
    y = transpose(y, (0, 3, 1, 4, 2))
    return reshape(y, (c, H * r, W * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    c, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise ShapeError(f"pixel_unshuffle: {Hr}x{Wr} not divisible by {r}")
    H, W = Hr // r, Wr // r
    y = reshape(x, (c, H, r, W, r))
    y = transpose(y, (0, 2, 4, 1, 3))
    return reshape(y, (c * r * r, H, W))


def patchify(f: Tensor, p: int) -> Tensor:
    """Split [C, H, W] into non-overlapping p x p tiles, one token per tile.

    Tiles come in row-major tile order; each token is the tile flattened
    channel-major, then row-major within the tile.
    """
    C, H, W = f.shape
    if H % p or W % p:
        raise ShapeError(f"patchify: patch {p} does not divide {H}x{W}")
    y = reshape(f, (C, H // p, p, W // p, p))
    y = transpose(y, (1, 3, 0, 2, 4))
    return reshape(y, ((H // p) * (W // p), C * p * p))


def unpatchify(seq: Tensor, p: int, C: int, H: int, W: int) -> Tensor:
    T, d = seq.shape
    if T != (H // p) * (W // p) or d != C * p * p:
        raise ShapeError(f"unpatchify: sequence {seq.shape} does not tile {C}x{H}x{W} with p={p}")
    y = reshape(seq, (H // p, W // p, C, p, p))
    y = transpose(y, (2, 0, 3, 1, 4))
    return reshape(y, (C, H, W))
