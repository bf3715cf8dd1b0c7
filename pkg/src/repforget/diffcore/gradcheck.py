"""Central-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``loss_fn`` rebuilds the forward pass from the current parameter values.
    With ``max_coords`` set, that many coordinates per parameter are sampled
    from ``rng``; otherwise every coordinate is checked.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    for p in params:
        p.grad = None
    analytic = backward(loss_fn(), params)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        gflat = g.reshape(-1)
        for k in coords:
            orig = flat[k]
            with no_grad():
                flat[k] = orig + epsilon
                up = loss_fn().item()
                flat[k] = orig - epsilon
                down = loss_fn().item()
            flat[k] = orig
            fd = (up - down) / (2 * epsilon)
            err = abs(gflat[k] - fd) / max(1e-8, abs(gflat[k]) + abs(fd))
            worst = max(worst, err)
    return worst
