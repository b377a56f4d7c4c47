from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError, ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params[i].data``.

    Raises NumericError (and leaves params and state untouched) when any
    gradient is non-finite.
    """
    if state.lr <= 0:
        raise ValueError("lr must be positive")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"grad shape {np.shape(g)} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; Adam step aborted")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Thin holder binding a parameter list to an :class:`AdamState`."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        adam_step(self.params, grads, self.state)
