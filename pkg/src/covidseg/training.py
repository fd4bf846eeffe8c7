"""Supervised lung-model training: Dice_NS loss, Adam with L2 decay, linear
learning-rate schedule, case-level validation split, best-checkpoint selection.

Training is deterministic under a fixed seed: the seed fixes weight init, the
case split, and the per-epoch shuffle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .network import DEFAULT_ARCH, ArchitectureSpec, ModelParams, backward_training, forward_batch, forward_training, init_params
from .neural import adam_step, init_adam_state
from .preprocess import PreprocessConfig, extract_training_slices
from .volumes import BinaryMask, Volume, require_same_geometry

DICE_EPS = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    lr_start: float = 0.02
    lr_end: float = 0.001
    batch_size: int = 20
    weight_decay: float = 1e-4
    epochs: int = 50
    val_fraction: float = 0.05
    seed: int = 0
    dataset_role: str = "covid"  # which model this run produces: "normal" or "covid"

    def __post_init__(self):
        if not 0.0 < self.lr_end <= self.lr_start:
            raise DataError(f"need 0 < lr_end <= lr_start, got {self.lr_end}, {self.lr_start}")
        if not 0.0 < self.val_fraction < 1.0:
            raise DataError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1 or self.epochs < 1:
            raise DataError("batch_size and epochs must be >= 1")
        if self.dataset_role not in ("normal", "covid"):
            raise DataError(f"dataset_role must be 'normal' or 'covid', got {self.dataset_role!r}")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_dice: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    n_train_cases: int = 0
    n_val_cases: int = 0
    n_train_slices: int = 0
    n_val_slices: int = 0
    checkpoint_path: str | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "lr", "train_loss", "val_loss", "val_dice"])
            for row in self.epochs:
                writer.writerow(
                    [
                        row.epoch,
                        f"{row.lr:.8f}",
                        f"{row.train_loss:.8f}",
                        f"{row.val_loss:.8f}",
                        f"{row.val_dice:.8f}",
                    ]
                )


def dice_ns_loss(pred_fg: np.ndarray, target: np.ndarray, eps: float = DICE_EPS):
    """Soft Dice loss with non-squared denominator sums over all voxels given.

    loss = 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)

    Returns (loss, gradient wrt pred_fg). Sums run over the whole array, so a
    batch contributes a single global Dice.
    """
    if pred_fg.shape != target.shape:
        raise DataError(f"loss shape mismatch: pred {pred_fg.shape} vs target {target.shape}")
    g = target.astype(pred_fg.dtype, copy=False)
    inter = float(np.sum(pred_fg * g, dtype=np.float64))
    sp = float(np.sum(pred_fg, dtype=np.float64))
    sg = float(np.sum(g, dtype=np.float64))
    num = 2.0 * inter + eps
    den = sp + sg + eps
    loss = 1.0 - num / den
    grad = (num / den**2 - (2.0 / den) * g).astype(pred_fg.dtype)
    return loss, grad


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear decay from lr_start to lr_end across the configured epochs."""
    if not 0 <= epoch < cfg.epochs:
        raise DataError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.lr_start
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * epoch / (cfg.epochs - 1)


def split_dataset(cases: list, val_fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic case-level split; validation gets max(1, round(fraction*N))."""
    if len(cases) < 2:
        raise DataError(f"need >= 2 cases to split, got {len(cases)}")
    order = np.random.default_rng(seed).permutation(len(cases))
    n_val = max(1, round(val_fraction * len(cases)))
    if n_val >= len(cases):
        raise DataError(f"validation split would consume all {len(cases)} cases")
    val_idx = set(order[:n_val].tolist())
    train = [cases[i] for i in range(len(cases)) if i not in val_idx]
    val = [cases[i] for i in range(len(cases)) if i in val_idx]
    return train, val


def _slice_pool(cases, pre_cfg: PreprocessConfig, tag: str):
    images, masks = [], []
    for i, (volume, lung) in enumerate(cases):
        for norm_slice, mask in extract_training_slices(volume, lung, pre_cfg, f"{tag}{i:03d}"):
            images.append(norm_slice.pixels)
            masks.append(mask)
    x = np.stack(images)[:, None].astype(np.float32)
    y = np.stack(masks)
    return x, y


def _evaluate(params: ModelParams, x: np.ndarray, y: np.ndarray, batch_size: int):
    """Pooled validation loss and hard Dice (threshold 0.5) over all voxels."""
    inter = sp = sg = 0.0
    hard_inter = hard_pred = 0
    for start in range(0, x.shape[0], batch_size):
        fg = forward_batch(params, x[start : start + batch_size])
        gb = y[start : start + batch_size]
        g = gb.astype(fg.dtype)
        inter += float(np.sum(fg * g, dtype=np.float64))
        sp += float(np.sum(fg, dtype=np.float64))
        sg += float(np.sum(g, dtype=np.float64))
        pred = fg >= 0.5
        hard_inter += int(np.count_nonzero(pred & gb))
        hard_pred += int(np.count_nonzero(pred))
    loss = 1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS)
    total_true = int(sg)
    denom = hard_pred + total_true
    dice = 2.0 * hard_inter / denom if denom else 1.0
    return loss, dice


def train_model(
    cases: list[tuple[Volume, BinaryMask]],
    cfg: TrainConfig,
    pre_cfg: PreprocessConfig | None = None,
    arch: ArchitectureSpec = DEFAULT_ARCH,
) -> tuple[ModelParams, TrainReport]:
    """Train one lung model and return the best-validation-Dice checkpoint."""
    if pre_cfg is None:
        pre_cfg = PreprocessConfig()
    if not cases:
        raise DataError("no training cases")
    for i, (volume, lung) in enumerate(cases):
        require_same_geometry(volume, lung, f"training case {i}")
        if not lung.voxels.any():
            raise DataError(f"training case {i}: lung mask is empty")

    train_cases, val_cases = split_dataset(cases, cfg.val_fraction, cfg.seed)
    x_train, y_train = _slice_pool(train_cases, pre_cfg, "train")
    x_val, y_val = _slice_pool(val_cases, pre_cfg, "val")

    params = init_params(cfg.seed, arch)
    state = init_adam_state(params.tensors)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)

    report = TrainReport(
        n_train_cases=len(train_cases),
        n_val_cases=len(val_cases),
        n_train_slices=x_train.shape[0],
        n_val_slices=x_val.shape[0],
    )
    best_dice = -1.0
    best_params = params.copy()
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = shuffle_rng.permutation(x_train.shape[0])
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            fg, cache = forward_training(params, x_train[idx])
            loss, grad_fg = dice_ns_loss(fg, y_train[idx])
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}, step {step}: {loss!r}"
                )
            grads = backward_training(params, cache, grad_fg)
            step += 1
            adam_step(
                params.tensors, grads, state, step, lr, weight_decay=cfg.weight_decay
            )
            losses.append(loss)
        val_loss, val_dice = _evaluate(params, x_val, y_val, cfg.batch_size)
        report.epochs.append(
            EpochStats(epoch, lr, float(np.mean(losses)), val_loss, val_dice)
        )
        if val_dice > best_dice:
            best_dice = val_dice
            best_params = params.copy()
            report.best_epoch = epoch
    return best_params, report
