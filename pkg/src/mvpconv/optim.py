"""Adam with bias correction, updating parameter tensors in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Array, Tensor
from .errors import ContractViolation, OptimizerError


@dataclass
class AdamState:
    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)
    t: int = 0

    @classmethod
    def create(cls, params, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        params = list(params)
        state = cls(params=params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(state: AdamState, grads) -> None:
    """One bias-corrected update.  Refuses the whole step (no buffer or
    counter change) if any gradient is non-finite."""
    gs = []
    for p in state.params:
        g = grads[p]
        g_arr = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g_arr.shape != p.data.shape:
            raise ContractViolation(
                f"gradient shape {g_arr.shape} != parameter shape {p.data.shape}"
            )
        if not np.all(np.isfinite(g_arr)):
            raise OptimizerError("non-finite gradient; step refused")
        gs.append(g_arr)

    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(state.params, gs, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
