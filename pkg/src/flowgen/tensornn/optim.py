"""Adam/AdamW optimizers and Polyak averaging for target networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus hyperparameters.

    kind "adam" applies weight decay coupled through the gradient;
    kind "adamw" applies it decoupled, directly shrinking the weights.
    """

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind: {self.kind}")


def make_optimizer(kind: str, params: ParamSet, lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8,
                   weight_decay: float = 0.0) -> OptimizerState:
    state = OptimizerState(kind=kind, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                           weight_decay=weight_decay)
    for name, t in params.items():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def optimizer_step(params: ParamSet, grads: dict[str, np.ndarray],
                   state: OptimizerState) -> ParamSet:
    """Apply one Adam/AdamW update in place; returns the same ParamSet."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"missing gradient for parameter {name}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        if state.kind == "adam" and state.weight_decay != 0.0:
            g = g + state.weight_decay * p.data
        if state.kind == "adamw" and state.weight_decay != 0.0:
            p.data *= 1.0 - state.lr * state.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def polyak_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    """target <- tau * target + (1 - tau) * online, elementwise in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    for name, t in target.items():
        o = online[name]
        if o.data.shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name}: {o.data.shape} vs {t.data.shape}")
        t.data *= tau
        t.data += (1.0 - tau) * o.data
    return target
