"""Finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NumericalError, Record, Tensor, backward


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    tol: float | None = None,
    coords: np.ndarray | None = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``f`` must be deterministic and build its graph from ``x``. ``coords``
    restricts probing to a subset of flat indices (all by default). When
    ``tol`` is given, an AssertionError is raised if the error exceeds it.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = x.data.copy()
    probe = Tensor(base.copy(), requires_grad=True)
    with Record() as rec:
        out = f(probe)
    backward(out, rec)
    analytic = probe.grad.reshape(-1) if probe.grad is not None else np.zeros(base.size)

    idx = np.arange(base.size) if coords is None else np.asarray(coords)
    flat = base.reshape(-1)
    worst = 0.0
    for i in idx:
        vals = []
        for sign in (1.0, -1.0):
            pert = flat.copy()
            pert[i] += sign * eps
            y = f(Tensor(pert.reshape(base.shape))).item()
            if not np.isfinite(y):
                raise NumericalError(f"non-finite function value while probing coordinate {i}")
            vals.append(y)
        numeric = (vals[0] - vals[1]) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    if tol is not None and worst > tol:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3e} > {tol:.1e}")
    return worst
