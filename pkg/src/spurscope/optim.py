"""First-order optimizers operating on named parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")

    def scalars(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "step": self.step}


def optimizer_step(state: OptimizerState, params: dict, grads: dict) -> None:
    """Update ``params`` (name -> Tensor) in place from ``grads`` (name -> array).

    Parameters without a gradient are left untouched; Adam moments for them
    are not advanced.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if state.kind == "sgd":
            p.data = (p.data - state.lr * g).astype(p.dtype)
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        p.data = (p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
