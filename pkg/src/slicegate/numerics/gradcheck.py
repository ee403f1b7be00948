"""Finite-difference verification of analytic gradients.

Runs in float64 only: central differences at step 1e-5 lose too many bits
in float32 to make the default 1e-4 relative tolerance meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from slicegate.errors import NumericError
from slicegate.numerics.tensor import Tensor


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst_input: int
    worst_coord: tuple

    def __bool__(self):
        return self.passed


def grad_check(f, inputs: list[Tensor], step: float = 1e-5, tol: float = 1e-4,
               max_coords_per_input: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare f's analytic gradient to central differences, coordinate-wise.

    f maps the given tensors to a scalar Tensor. Every coordinate of every
    input is checked unless max_coords_per_input caps large tensors, in
    which case the checked subset is drawn from `rng`. Relative error uses
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise NumericError(f"grad_check requires float64 inputs, got {t.data.dtype}")
        t.grad = None

    out = f(*inputs)
    if out.data.size != 1:
        raise NumericError("grad_check target must be scalar")
    out.backward()
    analytic = []
    for t in inputs:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        if not np.isfinite(t.grad).all():
            raise NumericError("non-finite analytic gradient")
        analytic.append(t.grad.copy())

    worst = 0.0
    worst_input, worst_coord = -1, ()
    for i, t in enumerate(inputs):
        coords = list(np.ndindex(t.data.shape))
        if max_coords_per_input is not None and len(coords) > max_coords_per_input:
            if rng is None:
                raise NumericError("coordinate sampling requires an rng")
            picks = rng.choice(len(coords), size=max_coords_per_input, replace=False)
            coords = [coords[j] for j in picks]
        for c in coords:
            orig = t.data[c]
            t.data[c] = orig + step
            f_plus = float(f(*inputs).data)
            t.data[c] = orig - step
            f_minus = float(f(*inputs).data)
            t.data[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            if not np.isfinite(numeric):
                raise NumericError("non-finite numeric gradient")
            a = float(analytic[i][c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst, worst_input, worst_coord = rel, i, c
    return GradCheckResult(passed=worst < tol, max_rel_error=worst,
                           worst_input=worst_input, worst_coord=worst_coord)
