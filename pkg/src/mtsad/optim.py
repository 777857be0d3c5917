"""Bias-corrected Adam over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

Params = dict[str, np.ndarray]


@dataclass
class AdamState:
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Params, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(state: AdamState, params: Params, grads: Params,
              lr: float | None = None) -> tuple[Params, AdamState]:
    """One update; returns fresh parameter and state dicts.

    ``lr`` overrides the stored rate for this step only (warmup schedules).
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name!r} missing or shape-mismatched")
    t = state.step + 1
    rate = state.lr if lr is None else lr
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        new_params[name] = p - rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    next_state = AdamState(step=t, m=new_m, v=new_v, lr=state.lr,
                           beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return new_params, next_state
