"""Central-difference gradient verification.

The oracle side of every backward pass in this package: perturb sampled
coordinates of each parameter by +-eps, difference the loss, and compare
against the analytic gradient from the tape. Run under float64
(``use_dtype(np.float64)``) for meaningful tolerances.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, no_grad

# Relative-error denominator floor; differences below this scale count as zero.
_REL_FLOOR = 1e-6


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int = 24,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be a deterministic closure over ``params`` returning a
    scalar Tensor. Up to ``max_coords`` coordinates per tensor are sampled
    (all of them when the tensor is small).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    if isinstance(params, Mapping):
        items = list(params.items())
    else:
        items = [(str(i), p) for i, p in enumerate(params)]
    if rng is None:
        rng = np.random.default_rng(0)

    for _, p in items:
        p.requires_grad = True
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise FloatingPointError("loss is not finite at the expansion point")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in items
    }

    worst = 0.0
    for name, p in items:
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                f_plus = float(loss_fn().data)
                flat[i] = orig - eps
                f_minus = float(loss_fn().data)
                flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_flat[i])
            denom = max(abs(a), abs(numeric), _REL_FLOOR)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
