"""AdamW with decoupled weight decay and the warmup-cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the fixed hyper-parameters."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    lr: float = 2e-5
    weight_decay: float = 4e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Dict[str, Tensor], lr: float = 2e-5,
             weight_decay: float = 4e-2, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            t=0, lr=lr, weight_decay=weight_decay,
            beta1=beta1, beta2=beta2, eps=eps,
        )


def adamw_step(state: OptimizerState, params: Dict[str, Tensor], lr_now: float) -> None:
    """One decoupled-decay Adam update; reads gradients off the parameter tensors."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adamw_step: gradients missing for {missing}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for k, p in params.items():
        g = p.grad
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr_now * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data)


@dataclass(frozen=True)
class LrSchedule:
    base_rate: float
    final_rate: float = 1e-6
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ValueError(f"warmup_steps {self.warmup_steps} outside [0, {self.total_steps}]")
        if self.final_rate > self.base_rate:
            raise ValueError("final rate exceeds base rate")


def cosine_lr(schedule: LrSchedule, step: int) -> float:
    """Linear ramp to base over warmup, then cosine anneal to the final rate."""
    if step >= schedule.total_steps:
        return schedule.final_rate
    if step < schedule.warmup_steps:
        return schedule.base_rate * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    if span == 0:
        return schedule.final_rate
    progress = (step - schedule.warmup_steps) / span
    return schedule.final_rate + 0.5 * (schedule.base_rate - schedule.final_rate) * (
        1.0 + math.cos(math.pi * progress))


def make_schedule(base_rate: float, total_steps: int,
                  final_rate: float = 1e-6, warmup_frac: float = 0.1) -> LrSchedule:
    """Schedule with warmup fixed at a fraction of the run (default 10%)."""
    warmup = int(round(warmup_frac * total_steps))
    final = min(final_rate, base_rate)
    return LrSchedule(base_rate=base_rate, final_rate=final,
                      warmup_steps=warmup, total_steps=total_steps)
