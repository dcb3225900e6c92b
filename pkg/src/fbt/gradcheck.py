"""Finite-difference gradient verification.

Central differences with step 1e-4 in float64 are the reference every
backward rule is judged against. Non-scalar functions are reduced to a scalar
through a fixed random weighting so that the full Jacobian is exercised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NumericsError, Tensor


@dataclass
class GradCheckReport:
    name: str
    max_rel_errors: list = field(default_factory=list)  # one entry per checked input
    passed: bool = True
    failure: str = ""

    @property
    def worst(self) -> float:
        return max(self.max_rel_errors) if self.max_rel_errors else 0.0

    def __str__(self):
        status = "ok" if self.passed else f"FAIL ({self.failure})"
        return f"{self.name}: max_rel_err={self.worst:.3e} {status}"


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-4,
    tolerance: float = 1e-5,
    seed: int = 0,
    name: str = "f",
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must be deterministic; every input with requires_grad is checked
    element by element, so keep the shapes small. Non-finite values are
    reported as a failed check rather than raised.
    """
    report = GradCheckReport(name=name)
    try:
        probe = f(*inputs)
    except NumericsError as err:
        report.passed = False
        report.failure = f"non-finite forward value: {err}"
        return report
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal(probe.shape).astype(np.float64)

    def scalar(*args) -> float:
        out = f(*args)
        return float(np.sum(out.data.astype(np.float64) * weights))

    # Analytic pass.
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    loss_val = np.sum(out.data.astype(np.float64) * weights)
    if not np.isfinite(loss_val):
        report.passed = False
        report.failure = "non-finite forward value"
        return report
    from .tensor import mul, sum_

    sum_(mul(out, Tensor(weights.astype(out.data.dtype)))).backward()

    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.shape, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
        numeric = np.zeros(t.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        try:
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + step
                plus = scalar(*inputs)
                flat[i] = saved - step
                minus = scalar(*inputs)
                flat[i] = saved
                nflat[i] = (plus - minus) / (2.0 * step)
        except NumericsError as err:
            report.passed = False
            report.failure = f"non-finite intermediate: {err}"
            return report
        if not np.all(np.isfinite(numeric)):
            report.passed = False
            report.failure = "non-finite finite-difference estimate"
            return report
        err = _relative_error(analytic, numeric)
        report.max_rel_errors.append(err)
        if err > tolerance:
            report.passed = False
            report.failure = f"relative error {err:.3e} exceeds tolerance {tolerance:.1e}"
    return report
