"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ops import kink_monitor


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    eps: float
    precision: str
    checked: dict[str, int] = field(default_factory=dict)
    skipped_kinks: dict[str, int] = field(default_factory=dict)
    skipped_unresolved: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol

    def summary(self) -> str:
        lines = [f"eps={self.eps:g} precision={self.precision} worst={self.worst:.3e}"]
        for name, err in self.max_rel_err.items():
            lines.append(f"  {name:<40s} {err:.3e}  checked={self.checked.get(name, 0)}"
                         f" kinks={self.skipped_kinks.get(name, 0)}"
                         f" unresolved={self.skipped_unresolved.get(name, 0)}")
        return "\n".join(lines)


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-12)


def grad_check(f: Callable[[dict], float], params: dict[str, np.ndarray],
               analytic: dict[str, np.ndarray], eps: float = 1e-5,
               n_coords: int = 64, seed: int = 0,
               skip_kinks: bool = True, resolve_tol: Optional[float] = 1e-4) -> GradCheckReport:
    """Compare ``analytic`` gradients of ``f`` against central differences.

    ``f`` maps a parameter dict to a float. Per parameter, ``n_coords``
    coordinates are sampled (all of them if the tensor is smaller). With
    ``skip_kinks`` a coordinate is dropped when the relu/abs sign pattern
    differs between the two probes, since the difference quotient then
    straddles a non-differentiable point.

    Central differences carry a roundoff error of about u * |f| / eps
    (u = unit roundoff), so a gradient smaller than u * |f| / (eps * tol)
    cannot be resolved to relative accuracy ``tol``. With ``resolve_tol``
    set, coordinates where both the analytic and the numeric value fall
    below that floor (and are not both exactly zero) are counted as
    unresolved instead of compared.
    """
    for v in params.values():
        if v.dtype != np.float64:
            raise ValueError("grad_check requires 64-bit parameters")
    rng = np.random.default_rng(seed)
    work = {k: v.copy() for k, v in params.items()}
    report = GradCheckReport({}, eps, "float64")
    for name, value in params.items():
        flat = work[name].reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= n_coords else np.sort(rng.choice(n, n_coords, replace=False))
        worst, checked, kinks, unresolved = 0.0, 0, 0, 0
        ga = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with kink_monitor() as plus_signs:
                fp = f(work)
            flat[i] = orig - eps
            with kink_monitor() as minus_signs:
                fm = f(work)
            flat[i] = orig
            if skip_kinks and not _same_pattern(plus_signs, minus_signs):
                kinks += 1
                continue
            num = (fp - fm) / (2 * eps)
            if resolve_tol is not None:
                floor = np.finfo(np.float64).eps * max(abs(fp), abs(fm)) / (eps * resolve_tol)
                if 0.0 < max(abs(float(ga[i])), abs(num)) < floor:
                    unresolved += 1
                    continue
            worst = max(worst, rel_err(float(ga[i]), num))
            checked += 1
        report.max_rel_err[name] = worst
        report.checked[name] = checked
        report.skipped_kinks[name] = kinks
        report.skipped_unresolved[name] = unresolved
    return report


def _same_pattern(a: list, b: list) -> bool:
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))
