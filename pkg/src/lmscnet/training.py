"""Multiscale loss assembly and the training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_file
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .model import ALL_SCALES, LMSCNet
from .ops import weighted_masked_cross_entropy
from .optim import AdamState, adam_step
from .tensor import Tensor
from .voxel import UNKNOWN, LabelGrid, class_weights, compute_class_frequencies, flip_array, majority_pool

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    lr_decay: float = 0.98
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    epochs: int = 80
    alpha: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    singlescale: bool = False
    augment: bool = True
    class_eps: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if len(self.alpha) != len(ALL_SCALES):
            raise ConfigError(f"alpha needs {len(ALL_SCALES)} entries, got {self.alpha}")
        if min(self.alpha) < 0 or max(self.alpha) <= 0:
            raise ConfigError(f"alpha must be non-negative with at least one positive entry, got {self.alpha}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    @property
    def level_weights(self) -> tuple[float, ...]:
        return (1.0, 0.0, 0.0, 0.0) if self.singlescale else self.alpha

    @property
    def active_levels(self) -> tuple[int, ...]:
        return tuple(l for l, a in enumerate(self.level_weights) if a > 0)

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay**epoch


def pooled_target(labels: LabelGrid, level: int) -> np.ndarray:
    return majority_pool(labels, 2**level).labels


def level_loss(logits: Tensor, targets: Sequence[LabelGrid] | np.ndarray, weights: np.ndarray, level: int) -> Tensor:
    """Weighted cross-entropy at one scale against majority-pooled labels.

    ``targets`` is either full-resolution label grids (pooled here) or an
    already pooled (B, X, Y, Z) label array.
    """
    if isinstance(targets, np.ndarray):
        target = targets
    else:
        target = np.stack([pooled_target(g, level) for g in targets])
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"level {level}: pooled labels {target.shape} do not match logits {logits.shape}")
    mask = target != UNKNOWN
    return weighted_masked_cross_entropy(logits, np.where(mask, target, 0), weights, mask)


def total_loss(losses: dict[int, Tensor], alpha: Sequence[float]) -> Tensor:
    """Sum of ``alpha[l] * L_l`` over the provided levels."""
    if len(alpha) != len(ALL_SCALES):
        raise ConfigError(f"alpha needs {len(ALL_SCALES)} entries, got {len(alpha)}")
    total = None
    for l in sorted(losses):
        term = losses[l] * alpha[l]
        total = term if total is None else total + term
    if total is None:
        raise ConfigError("total_loss needs at least one level loss")
    return total


def dataset_class_weights(dataset, eps: float = 1e-3) -> np.ndarray:
    freq = compute_class_frequencies((s.labels for s in dataset), dataset.classes.num_classes)
    return class_weights(freq, eps)


@dataclass
class StepRecord:
    epoch: int
    batch: int
    loss: float
    level_losses: dict[int, float]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    wall_time: float


@dataclass
class TrainResult:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    adam: AdamState | None = None
    final_checkpoint: Path | None = None


class _Batcher:
    """Builds flipped network inputs and pooled targets, caching per-sample pooling."""

    def __init__(self, dataset, levels: tuple[int, ...]):
        self.dataset = dataset
        self.levels = levels
        self._cache: dict[int, tuple[np.ndarray, dict[int, np.ndarray]]] = {}

    def _sample(self, i: int):
        if i not in self._cache:
            s = self.dataset[i]
            if s.labels is None:
                raise DataError(f"sample {i} has no labels")
            self._cache[i] = (s.occupancy.dense(), {l: pooled_target(s.labels, l) for l in self.levels})
        return self._cache[i]

    def batch(self, indices, flips):
        xs, ys = [], {l: [] for l in self.levels}
        for i, (fx, fy) in zip(indices, flips):
            occ, targets = self._sample(i)
            xs.append(flip_array(occ, fx, fy).transpose(2, 0, 1))
            for l in self.levels:
                ys[l].append(flip_array(targets[l], fx, fy))
        return Tensor(np.stack(xs).astype(np.float64)), {l: np.stack(v) for l, v in ys.items()}


def train(
    model: LMSCNet,
    dataset,
    cfg: TrainConfig,
    out_dir=None,
    weights: np.ndarray | None = None,
    adam: AdamState | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of Adam on the multiscale loss.

    With ``out_dir`` set, a checkpoint is written after every epoch and a
    JSON line per epoch is appended to ``train_log.jsonl``.
    """
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    if weights is None:
        weights = dataset_class_weights(dataset, cfg.class_eps)
    weights = np.asarray(weights, dtype=np.float64)
    levels = cfg.active_levels
    alpha = cfg.level_weights
    params = [p.value for p in model.parameters()]
    adam = adam or AdamState.for_params(params, cfg.beta1, cfg.beta2)
    batcher = _Batcher(dataset, levels)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")
    result = TrainResult(adam=adam)
    n_batches = len(dataset) // cfg.batch_size
    if n_batches == 0:
        raise DataError(f"dataset of {len(dataset)} samples yields no full batch of {cfg.batch_size}")

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        epoch_losses = []
        for b in range(n_batches):
            idx = [int(i) for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            if cfg.augment:
                flips = [tuple(np.random.default_rng([cfg.seed, epoch, i]).random(2) < 0.5) for i in idx]
            else:
                flips = [(False, False)] * len(idx)
            x, targets = batcher.batch(idx, flips)
            logits = model.forward(x, levels)
            losses = {l: level_loss(logits[l], targets[l], weights, l) for l in levels}
            loss = total_loss(losses, alpha)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            loss.backward()
            adam_step(params, [p.grad for p in params], adam, lr)
            for p in params:
                p.grad = None
            rec = StepRecord(epoch, b, value, {l: t.item() for l, t in losses.items()})
            result.steps.append(rec)
            epoch_losses.append(value)
            if on_step is not None:
                on_step(rec)
        erec = EpochRecord(epoch, float(np.mean(epoch_losses)), lr, time.perf_counter() - t0)
        result.epochs.append(erec)
        log.info("epoch %d loss %.5f lr %.3g (%.1fs)", epoch, erec.loss, lr, erec.wall_time)
        if out is not None:
            with open(out / "train_log.jsonl", "a") as f:
                f.write(json.dumps(asdict(erec)) + "\n")
            save_file(out / f"epoch_{epoch:04d}.ckpt", model, adam)
    if out is not None:
        result.final_checkpoint = out / "final.ckpt"
        save_file(result.final_checkpoint, model, adam)
    return result
