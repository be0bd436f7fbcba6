"""Image quality metrics and the paired t-test."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class MetricError(ValueError):
    pass


def _pair(x, ref) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref, peak: float) -> float:
    """10 log10(peak^2 / MSE) in dB; +inf when the images are identical."""
    x, ref = _pair(x, ref)
    if not peak > 0:
        raise MetricError("peak must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def nmse(x, ref) -> float:
    x, ref = _pair(x, ref)
    denom = float(np.sum(ref * ref))
    if denom == 0.0:
        raise MetricError("NMSE undefined for an all-zero reference")
    return float(np.sum((x - ref) ** 2)) / denom


def _filter_valid(img: np.ndarray, g1: np.ndarray) -> np.ndarray:
    k = g1.size
    rows = sliding_window_view(img, k, axis=0) @ g1
    return sliding_window_view(rows, k, axis=1) @ g1


def ssim(x, ref, peak: float, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over every fully contained Gaussian window."""
    x, ref = _pair(x, ref)
    if x.ndim != 2 or min(x.shape) < window:
        raise MetricError(f"image {x.shape} smaller than the {window}x{window} window")
    r = np.arange(window) - (window - 1) / 2
    g1 = np.exp(-(r * r) / (2 * sigma * sigma))
    g1 /= g1.sum()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mx = _filter_valid(x, g1)
    my = _filter_valid(ref, g1)
    sxx = _filter_valid(x * x, g1) - mx * mx
    syy = _filter_valid(ref * ref, g1) - my * my
    sxy = _filter_valid(x * ref, g1) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricSummary:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    nmse: list[float] = field(default_factory=list)

    def add(self, x, gt) -> None:
        peak = float(np.max(gt))
        self.psnr.append(psnr(x, gt, peak))
        self.ssim.append(ssim(x, gt, peak))
        self.nmse.append(nmse(x, gt))

    @staticmethod
    def stats(values: list[float]) -> tuple[float, float]:
        v = np.asarray(values, dtype=np.float64)
        finite = v[np.isfinite(v)]
        if finite.size < v.size:
            warnings.warn(f"{v.size - finite.size} infinite value(s) excluded from the mean",
                          RuntimeWarning, stacklevel=2)
        if finite.size == 0:
            return math.nan, math.nan
        return float(finite.mean()), float(finite.std())

    def as_dict(self) -> dict:
        out = {}
        for name in ("psnr", "ssim", "nmse"):
            values = getattr(self, name)
            m, s = self.stats(values)
            out[name] = {"mean": m, "std": s, "values": list(values)}
        return out


# -- Student's t -------------------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    n: int
    mean_diff: float
    degenerate: bool = False


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired Student's t-test on d = a - b.

    Zero-variance differences are flagged ``degenerate``: identical samples
    give t = nan, p = 1; a constant nonzero shift gives t = +-inf, p = 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise MetricError("paired t-test needs at least 2 pairs")
    d = a - b
    md = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if md == 0.0:
            return TTestResult(math.nan, 1.0, n, 0.0, degenerate=True)
        return TTestResult(math.copysign(math.inf, md), 0.0, n, md, degenerate=True)
    t = md / (sd / math.sqrt(n))
    return TTestResult(t, t_sf_two_sided(t, n - 1), n, md)
