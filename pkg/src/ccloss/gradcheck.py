"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import NumericError, Tensor, backward, no_grad, watch_kinks


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference comparison.

    When the forward pass evaluates a relu/max within `kink_tol` of its
    nondifferentiable point, the check is reported as skipped instead of
    failed: central differences are meaningless there.
    """

    max_rel_error: float
    skipped: bool = False
    reason: str = ""

    def ok(self, tol: float) -> bool:
        return self.skipped or self.max_rel_error <= tol


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    kink_tol: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar `f()` against central differences.

    `f` must be a deterministic function of the current `params` data. The
    returned error is max over all parameter entries of
    |analytic - central| / max(1, |analytic|). Use float64 parameters for
    tight tolerances.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    for p in params:
        if not p.requires_grad:
            raise ValueError("all checked params must have requires_grad set")
        p.zero_grad()

    with watch_kinks() as watch:
        loss = f()
    if loss.size != 1:
        raise ValueError("f must evaluate to a scalar")
    if watch["margin"] < kink_tol:
        return GradCheckReport(np.nan, skipped=True,
                               reason=f"kink margin {watch['margin']:.2e} < {kink_tol:.0e}")
    backward(loss)
    analytic = [np.array(p.grad, dtype=np.float64) for p in params]

    def eval_scalar() -> float:
        with no_grad():
            value = f()
        if not np.isfinite(value.data).all():
            raise NumericError("non-finite value during finite differencing")
        return value.item()

    max_err = 0.0
    for p, an in zip(params, analytic):
        an_flat = an.reshape(-1)
        for i in range(p.data.size):
            orig = p.data.flat[i]
            p.data.flat[i] = orig + h
            f_plus = eval_scalar()
            p.data.flat[i] = orig - h
            f_minus = eval_scalar()
            p.data.flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(an_flat[i] - fd) / max(1.0, abs(an_flat[i]))
            if err > max_err:
                max_err = err
    return GradCheckReport(max_err)
