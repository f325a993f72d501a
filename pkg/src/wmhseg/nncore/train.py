"""Alternating discriminator / generator training with held-out checkpoint
selection."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, NumericError, UndefinedMetricError
from .losses import LossWeights, bce_with_logits, l1_loss
from .nets import ArchSpec, GanModel
from .optim import Adam, OptimizerConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss_g", "loss_d", "l1", "val_l1",
               "auc_pr_ventricle", "auc_pr_normal_wmh", "auc_pr_abnormal_wmh")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 1
    dropout_rate: float = 0.5
    rng_seed: int = 0
    checkpoint_every: int = 0
    holdout_fraction: float = 0.15

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainPair:
    image: np.ndarray   # frame-space input in [0, 1]
    target: np.ndarray  # anchor-encoded mask in [0, 1]
    case_id: str = ""


@dataclass
class TrainResult:
    model: GanModel
    log: list[dict]
    best_epoch: int
    final_state: dict = field(default_factory=dict)


def holdout_split(pairs: list[TrainPair], fraction: float):
    """Last ``fraction`` of cases (sorted by case_id) form the held-out set."""
    ids = sorted({p.case_id for p in pairs})
    n_hold = 0
    if len(ids) > 1 and fraction > 0:
        # at least one held-out case, at least one training case
        n_hold = min(max(int(round(fraction * len(ids))), 1), len(ids) - 1)
    held = set(ids[len(ids) - n_hold:])
    return [p for p in pairs if p.case_id not in held], [p for p in pairs if p.case_id in held]


def _stack(pairs, dtype):
    x = np.stack([p.image for p in pairs])[:, None].astype(dtype)
    y = np.stack([p.target for p in pairs])[:, None].astype(dtype)
    return x, y


def evaluate_holdout(model: GanModel, pairs: list[TrainPair]) -> dict:
    """Eval-mode mean L1 and pooled per-class AUC-PR on frame-space pairs."""
    from ..metrics import pr_curve
    from ..postproc import decode_classes, decode_probabilities

    if not pairs:
        return {"val_l1": math.nan, "auc_pr_ventricle": math.nan,
                "auc_pr_normal_wmh": math.nan, "auc_pr_abnormal_wmh": math.nan}
    l1s, probs, truths = [], [], []
    for p in pairs:
        out = model.predict(p.image)
        l1s.append(float(np.abs(out.astype(np.float64) - p.target).mean()))
        probs.append(decode_probabilities(out))
        truths.append(decode_classes(p.target).labels)
    probs = np.stack(probs, axis=1)
    truths = np.stack(truths)
    res = {"val_l1": float(np.mean(l1s))}
    for cid, name in ((1, "ventricle"), (2, "normal_wmh"), (3, "abnormal_wmh")):
        try:
            res[f"auc_pr_{name}"] = pr_curve(probs[cid], truths == cid, n_thresholds=200).auc
        except UndefinedMetricError:
            res[f"auc_pr_{name}"] = math.nan
    return res


def train(pairs: list[TrainPair], tcfg: TrainConfig = TrainConfig(),
          g_opt: OptimizerConfig = OptimizerConfig(), d_opt: OptimizerConfig = OptimizerConfig(),
          weights: LossWeights = LossWeights(), arch: ArchSpec = ArchSpec(),
          dtype=np.float32, on_epoch=None, on_checkpoint=None) -> TrainResult:
    """Per batch: one discriminator step on the real pair and the detached
    fake, then one generator step.  Returns the model restored to the epoch
    with the lowest held-out L1 (the last epoch if nothing is held out)."""
    if not pairs:
        raise DataError("training set is empty")
    size = arch.image_size
    for p in pairs:
        if p.image.shape != (size, size) or p.target.shape != (size, size):
            raise DataError(f"training pair for {p.case_id!r} is {p.image.shape}, network needs {size}x{size}")
    if arch.dropout_rate != tcfg.dropout_rate:
        arch = ArchSpec(arch.gen_channels, arch.disc_channels, arch.dropout_blocks,
                        tcfg.dropout_rate, arch.leaky_slope)

    init_seed, order_seed, drop_seed = np.random.SeedSequence(tcfg.rng_seed).spawn(3)
    model = GanModel.build(arch, seed=int(init_seed.generate_state(1)[0]), dtype=dtype)
    G, D = model.generator, model.discriminator
    G.set_rng(np.random.default_rng(drop_seed))
    order_rng = np.random.default_rng(order_seed)
    opt_g, opt_d = Adam(G, g_opt), Adam(D, d_opt)

    train_set, held = holdout_split(pairs, tcfg.holdout_fraction)
    rows = []
    best = (math.inf, 0, None)
    for epoch in range(1, tcfg.epochs + 1):
        order = order_rng.permutation(len(train_set))
        sums = np.zeros(3)
        n_batches = 0
        for step, start in enumerate(range(0, len(order), tcfg.batch_size), 1):
            batch = [train_set[i] for i in order[start:start + tcfg.batch_size]]
            x, y = _stack(batch, dtype)
            fake = G.forward(x, train=True)

            D.zero_grad()
            logits_real = D.forward_pair(x, y, train=True)
            loss_real, g_real = bce_with_logits(logits_real, 1.0)
            D.backward(0.5 * g_real)
            logits_fake = D.forward_pair(x, fake, train=True)
            loss_fake, g_fake = bce_with_logits(logits_fake, 0.0)
            D.backward(0.5 * g_fake)
            opt_d.step()
            loss_d = 0.5 * (loss_real + loss_fake)

            logits = D.forward_pair(x, fake, train=True)
            adv, g_adv = bce_with_logits(logits, 1.0)
            l1, g_l1 = l1_loss(fake, y)
            loss_g = weights.lambda_adv * adv + weights.lambda_l1 * l1
            grad_fake = weights.lambda_adv * D.backward_mask(g_adv) + weights.lambda_l1 * g_l1
            G.zero_grad()
            G.backward(grad_fake)
            opt_g.step()

            if not (math.isfinite(loss_g) and math.isfinite(loss_d)):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}: "
                                   f"loss_G={loss_g} loss_D={loss_d}")
            sums += (loss_g, loss_d, l1)
            n_batches += 1

        row = {"epoch": epoch, "loss_g": sums[0] / n_batches, "loss_d": sums[1] / n_batches,
               "l1": sums[2] / n_batches}
        row.update(evaluate_holdout(model, held))
        rows.append(row)
        log.info("epoch %d  loss_G %.4f  loss_D %.4f  L1 %.4f  val_L1 %.4f", epoch,
                 row["loss_g"], row["loss_d"], row["l1"], row["val_l1"])
        score = row["val_l1"] if held else -epoch
        if score < best[0]:
            best = (score, epoch, {k: v.copy() for k, v in model.state_arrays().items()})
        if on_epoch is not None:
            on_epoch(row)
        if on_checkpoint is not None and tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
            on_checkpoint(epoch, model)

    final_state = {k: v.copy() for k, v in model.state_arrays().items()}
    _, best_epoch, state = best
    for name, arr in model.state_arrays().items():
        arr[...] = state[name]
    model.meta = {"best_epoch": best_epoch, "epochs": tcfg.epochs, "seed": tcfg.rng_seed}
    return TrainResult(model, rows, best_epoch, final_state)


def write_log_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in LOG_COLUMNS})
