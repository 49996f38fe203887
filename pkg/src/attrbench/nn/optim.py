from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place on ``params`` (Tensors or arrays).

    Weight decay is added to the gradient before the moment updates.
    """
    if not state.m:
        state.m = [np.zeros_like(_arr(p)) for p in params]
        state.v = [np.zeros_like(_arr(p)) for p in params]
    if len(state.m) != len(params):
        raise ValueError("parameter list does not match optimiser state")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        w = _arr(p)
        if state.weight_decay:
            g = g + state.weight_decay * w
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        w -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype, copy=False)
    return params


def _arr(p):
    return p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
