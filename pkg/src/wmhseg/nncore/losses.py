"""Adversarial + L1 objective for the conditional GAN."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    lambda_l1: float = 100.0

    def __post_init__(self):
        if self.lambda_adv < 0 or self.lambda_l1 < 0:
            raise ValueError("loss weights must be non-negative")


def bce_with_logits(logits, target: float):
    """Mean binary cross-entropy of sigmoid(logits) against a constant label.

    Uses ``max(z, 0) - z*t + log1p(exp(-|z|))`` so large logits never
    overflow.  Returns ``(loss, dloss/dlogits)``.
    """
    z = logits.astype(np.float64)
    loss = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    sig = np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))
    grad = (sig - target) / z.size
    return float(loss.mean()), grad.astype(logits.dtype)


def l1_loss(pred, target):
    """Mean absolute error; the subgradient at ``pred == target`` is 0."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.abs(diff).astype(np.float64).mean()), (np.sign(diff) / diff.size).astype(pred.dtype)


@dataclass
class GanLoss:
    loss_g: float
    loss_d: float
    adv: float
    l1: float


def gan_loss(d_logits_real, d_logits_fake, gen_out, target, w: LossWeights = LossWeights()) -> GanLoss:
    """Scalar generator and discriminator objectives.

    ``d_logits_fake`` are the discriminator's logits for the generated pair;
    the generator wants them labelled real, the discriminator fake.
    """
    if gen_out.shape != target.shape:
        raise ValueError(f"generator output {gen_out.shape} and target {target.shape} differ")
    adv, _ = bce_with_logits(d_logits_fake, 1.0)
    l1, _ = l1_loss(gen_out, target)
    real, _ = bce_with_logits(d_logits_real, 1.0)
    fake, _ = bce_with_logits(d_logits_fake, 0.0)
    return GanLoss(w.lambda_adv * adv + w.lambda_l1 * l1, 0.5 * (real + fake), adv, l1)
