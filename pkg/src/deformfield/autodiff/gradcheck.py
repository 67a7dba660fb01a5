"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_err: float
    failures: list = field(default_factory=list)  # (input_idx, flat_idx, analytic, numeric)
    excluded: list = field(default_factory=list)  # non-differentiable components

    def __bool__(self):
        return self.passed


def gradcheck(f, inputs, eps=1e-5, tol=1e-4, kink_tol=1e-2) -> GradcheckReport:
    """Compare analytic gradients of scalar-valued ``f`` against central differences.

    ``inputs`` is a list of Tensors; every input with requires_grad=True is
    perturbed componentwise. Relative error is |a - n| / max(|a|, |n|, eps).
    Non-finite analytic or numeric gradients fail with their location recorded.
    Components where the two one-sided difference quotients disagree (a kink,
    e.g. relu evaluated exactly at 0) are reported in ``excluded`` instead of
    being compared.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = list(inputs)
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"gradcheck requires a scalar function, got shape {out.shape}")
    out.backward()

    with no_grad():
        f0 = float(f(*inputs).data)

    max_err = 0.0
    failures = []
    excluded = []
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            with no_grad():
                fp = float(f(*inputs).data)
            flat[j] = orig - eps
            with no_grad():
                fm = float(f(*inputs).data)
            flat[j] = orig
            slope_plus = (fp - f0) / eps
            slope_minus = (f0 - fm) / eps
            kink_gap = abs(slope_plus - slope_minus)
            if kink_gap > kink_tol * max(1.0, abs(slope_plus), abs(slope_minus)):
                excluded.append((i, j, slope_minus, slope_plus))
                continue
            num = (fp - fm) / (2.0 * eps)
            ana = float(analytic.reshape(-1)[j])
            if not (np.isfinite(num) and np.isfinite(ana)):
                failures.append((i, j, ana, num))
                max_err = np.inf
                continue
            err = abs(ana - num) / max(abs(ana), abs(num), eps)
            if err > max_err:
                max_err = err
            if err > tol:
                failures.append((i, j, ana, num))
    return GradcheckReport(passed=(not failures) and np.isfinite(max_err),
                           max_rel_err=max_err, failures=failures,
                           excluded=excluded)
