from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


def adam_step(params, grads, m, v, cfg: OptimizerConfig, t: int) -> None:
    """One bias-corrected Adam update, in place on ``params``, ``m`` and ``v``.

    All four arguments are parallel mappings (or sequences) of arrays.
    """
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    step = cfg.learning_rate / (1 - b1 ** t)
    inv_bc2 = 1 / np.sqrt(1 - b2 ** t)
    for key in params:
        g = grads[key]
        mk, vk, p = m[key], v[key], params[key]
        if mk.shape != g.shape or vk.shape != g.shape:
            raise ValueError(f"moment state for {key!r} has the wrong shape")
        mk *= b1
        mk += (1 - b1) * g
        vk *= b2
        vk += (1 - b2) * (g * g)
        # p -= lr * mhat / (sqrt(vhat) + eps), with the bias corrections folded in
        denom = np.sqrt(vk)
        denom *= inv_bc2
        denom += cfg.epsilon
        np.divide(mk, denom, out=denom)
        denom *= step
        p -= denom.astype(p.dtype, copy=False)


class Adam:
    """Holds moment buffers for one module and steps its parameters."""

    def __init__(self, module, cfg: OptimizerConfig = OptimizerConfig()):
        self.cfg = cfg
        self.params = dict(module.named_parameters())
        self.grads = dict(module.named_grads())
        self.m = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.grads, self.m, self.v, self.cfg, self.t)
