"""Finite-difference verification of the backward pass.

The analytic gradient comes from one ``backward`` call; the numeric side
re-evaluates the loss at perturbed coordinates, so the two routes share no
code path beyond the forward evaluation itself.
"""

from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np

from .tensor import Tensor, backward, zero_grads


class GradCheckFailure(RuntimeError):
    """Non-finite loss encountered while probing a coordinate."""

    def __init__(self, param: str, index: int, value: float):
        super().__init__(f"non-finite loss {value} while perturbing {param}[{index}]")
        self.param = param
        self.index = index


def grad_check(f: Callable[[Dict[str, Tensor]], Tensor],
               params: Dict[str, Tensor],
               h: float = 1e-5,
               samples_per_param: int = 3,
               rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``samples_per_param`` coordinates from every parameter array.
    Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|).
    Parameters should be float64; finite differences are unreliable at 32-bit.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    if rng is None:
        rng = np.random.default_rng(0)

    zero_grads(params.values())
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise GradCheckFailure("<analytic pass>", -1, loss.item())
    backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in params.items()}

    # Perturbation passes need no graph; drop requires_grad while probing.
    flags = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        worst = 0.0
        for name, p in params.items():
            flat = p.data.reshape(-1)
            n = flat.size
            k = min(samples_per_param, n)
            idx = rng.choice(n, size=k, replace=False)
            for i in idx:
                i = int(i)
                orig = flat[i]
                flat[i] = orig + h
                up = float(f(params).data.reshape(-1)[0])
                flat[i] = orig - h
                down = float(f(params).data.reshape(-1)[0])
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise GradCheckFailure(name, i, up if not np.isfinite(up) else down)
                numeric = (up - down) / (2.0 * h)
                a = float(analytic[name].reshape(-1)[i])
                rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, rel)
    finally:
        for k, p in params.items():
            p.requires_grad = flags[k]
        zero_grads(params.values())
    return worst
