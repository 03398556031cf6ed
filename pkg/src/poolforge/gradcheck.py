"""Central-finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NumericError
from .tensor import Tape, Tensor

__all__ = ["GradCheckReport", "grad_check"]


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple
    tolerance: float
    coords_checked: int
    passed: bool

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
            f"(tol {self.tolerance:.1e}, {self.coords_checked} coords, "
            f"worst at {self.worst_index})"
        )


def _scalar(value: Tensor, where: str) -> float:
    if value.size != 1:
        raise NumericError(f"{where}: function under test must return a scalar")
    return value.item()


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-6,
    sample: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare the tape gradient of ``f`` at ``x`` against central differences.

    ``f`` must be a pure scalar-valued function of one tensor. Per-coordinate
    relative error is |fd - tape| / max(|fd|, |tape|, 1): relative to the
    gradient magnitude, floored at unit scale so zero-gradient coordinates do
    not divide by noise. When ``sample`` is given, only that many randomly
    chosen coordinates are probed (for large composite checks); otherwise
    every coordinate is.
    """
    if x.dtype != np.float64:
        raise NumericError("grad_check requires float64 inputs")
    if not (1e-7 <= h <= 1e-3):
        raise ValueError(f"step size h={h} outside [1e-7, 1e-3]")

    with Tape() as tape:
        loss = f(x)
    _scalar(loss, "grad_check")
    grads = tape.backward(loss)
    g = grads.get(x)
    if g is None:
        g = np.zeros_like(x.data)

    n = x.size
    if sample is not None and sample < n:
        rng = rng if rng is not None else np.random.default_rng(0)
        indices = rng.choice(n, size=sample, replace=False)
    else:
        indices = np.arange(n)

    base = x.data.reshape(-1)
    probe = base.copy()
    g_flat = g.reshape(-1)

    max_rel = 0.0
    worst = 0
    for i in indices:
        orig = probe[i]
        probe[i] = orig + h
        f_plus = _scalar(f(Tensor._wrap(probe.reshape(x.shape), "grad_check")),
                         "grad_check")
        probe[i] = orig - h
        f_minus = _scalar(f(Tensor._wrap(probe.reshape(x.shape), "grad_check")),
                          "grad_check")
        probe[i] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        if not np.isfinite(fd):
            raise NumericError("non-finite value during finite differencing")
        rel = abs(fd - g_flat[i]) / max(abs(fd), abs(g_flat[i]), 1.0)
        if rel > max_rel:
            max_rel = rel
            worst = int(i)

    return GradCheckReport(
        max_rel_error=max_rel,
        worst_index=np.unravel_index(worst, x.shape),
        tolerance=tol,
        coords_checked=len(indices),
        passed=max_rel < tol,
    )
