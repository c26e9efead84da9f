"""
Loss, optimizer, learning-rate schedule, augmentation, fold plans and the
training loop.

Recipe defaults: batch 32, Adam (0.9, 0.999, 1e-8) at lr 0.001, halving the
learning rate after 8 epochs without validation-loss improvement, three
synthetic images (crop, rotation, flip) per training image, 5-fold plans.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage
from scipy.special import log_softmax
from sklearn.model_selection import GroupKFold, KFold

from .core import TrainingLog
from .exceptions import ConfigurationError, EmptySplitError, NonFiniteGradientError, SchemaMismatchError
from .layers import load_state_arrays, reseed_dropout, state_arrays
from .model import LANMSFF
from .tensor import Context, Parameter, Tape, Tensor, backward, no_grad, record

logger = logging.getLogger(__name__)

Split = Tuple[np.ndarray, np.ndarray]


class TrainConfig(BaseModel):
    """
    Optimisation hyperparameters.

    ``schedule_mode`` selects between the patience reading of the decay rule
    (decay once validation loss has not improved for ``patience_epochs``
    consecutive epochs) and the fixed-interval reading (check once every
    ``patience_epochs`` epochs).
    """

    model_config = ConfigDict(frozen=True)

    batch_size: int = Field(default=32, ge=1)
    lr0: float = Field(default=0.001, gt=0.0)
    patience_epochs: int = Field(default=8, ge=1)
    decay_factor: float = Field(default=0.5, gt=0.0, lt=1.0)
    max_epochs: int = Field(default=50, ge=1)
    seed: int = Field(default=0, ge=0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps_adam: float = Field(default=1e-8, gt=0.0)
    schedule_mode: Literal["patience", "fixed_interval"] = "patience"
    augment: bool = True
    workers: int = Field(default=1, ge=1)


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _check_targets(targets: np.ndarray, shape: Tuple[int, ...]) -> None:
    if targets.shape != shape:
        raise SchemaMismatchError(f"targets have shape {targets.shape}, predictions {shape}")
    if np.any(targets.sum(axis=1) <= 0):
        raise ValueError("every target row needs a positive label mass (degenerate one-hot row)")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """
    Mean categorical cross-entropy from logits (log-sum-exp form).

    The gradient with respect to the logits is (softmax - targets) / N.

    Raises:
        ValueError: a target row is all zero.
    """
    targets = np.asarray(targets, dtype=logits.dtype)
    _check_targets(targets, logits.shape)
    n = logits.shape[0]

    def forward(z: np.ndarray) -> Tuple[np.ndarray, Context]:
        log_p = log_softmax(z, axis=1)
        return np.asarray(-(targets * log_p).sum() / n, dtype=z.dtype), {"log_p": log_p}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray]:
        return (g * (np.exp(ctx["log_p"]) - targets) / n,)

    return record("cross_entropy", [logits], forward, backward_fn)


def cross_entropy_from_probabilities(probabilities: np.ndarray, targets: np.ndarray) -> float:
    """Mean -log p[true] for rows that already sum to 1."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    _check_targets(targets, probabilities.shape)
    with np.errstate(divide="ignore"):
        log_p = np.where(targets > 0, np.log(probabilities), 0.0)
    return float(-(targets * log_p).sum() / len(probabilities))


# --------------------------------------------------------------------------
# Optimizer and schedule
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moments per parameter name and the shared step counter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Sequence[Parameter],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """
    One bias-corrected Adam update, in place on the parameter values.

    Parameters without an entry in ``grads`` (or not trainable) are left
    untouched. All gradients are checked before anything is written.

    Raises:
        NonFiniteGradientError: some gradient holds NaN or Inf; no parameter
            or moment was modified.
    """
    active = [p for p in params if p.trainable and p.name in grads]
    for param in active:
        if not np.all(np.isfinite(grads[param.name])):
            raise NonFiniteGradientError(param.name)

    state.t += 1
    correction1 = 1.0 - beta1**state.t
    correction2 = 1.0 - beta2**state.t
    for param in active:
        grad = grads[param.name]
        m = state.m.get(param.name)
        v = state.v.get(param.name)
        if m is None or v is None:
            m = np.zeros_like(param.value.data)
            v = np.zeros_like(param.value.data)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[param.name], state.v[param.name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.value.data = (param.value.data - update).astype(param.value.dtype, copy=False)
    return state


def decay_epochs(history: Sequence[float], cfg: TrainConfig) -> List[int]:
    """1-based epochs after which the learning rate is decayed, replaying ``history``."""
    decays: List[int] = []
    best = math.inf
    if cfg.schedule_mode == "patience":
        stale = 0
        for epoch, loss in enumerate(history, start=1):
            if loss < best:
                best, stale = loss, 0
            else:
                stale += 1
                if stale == cfg.patience_epochs:
                    decays.append(epoch)
                    stale = 0
        return decays

    window_best = math.inf
    for epoch, loss in enumerate(history, start=1):
        window_best = min(window_best, loss)
        if epoch % cfg.patience_epochs == 0:
            if window_best >= best:
                decays.append(epoch)
            best = min(best, window_best)
            window_best = math.inf
    return decays


def lr_schedule(history: Sequence[float], current_lr: float, cfg: TrainConfig) -> float:
    """
    Learning rate for the next epoch.

    Called after every epoch with the validation losses so far; returns
    ``current_lr * decay_factor`` when the rule fires at the latest epoch and
    ``current_lr`` otherwise, so the sequence is non-increasing.
    """
    if history and decay_epochs(history, cfg)[-1:] == [len(history)]:
        new_lr = current_lr * cfg.decay_factor
        logger.info("validation loss stalled; learning rate %.3g -> %.3g", current_lr, new_lr)
        return new_lr
    return current_lr


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------

CROP_SIZE = 56
MAX_ROTATION = 15.0


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sample generator, independent of processing order."""
    return np.random.default_rng([seed, index])


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def rotate(image: np.ndarray, angle: float) -> np.ndarray:
    """Bilinear rotation about the centre with replicated borders, (C, H, W) input."""
    out = ndimage.rotate(image, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def random_crop(image: np.ndarray, rng: np.random.Generator, size: int = CROP_SIZE) -> np.ndarray:
    """Crop a size x size window at a uniform position and resize it back."""
    _, h, w = image.shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    window = image[:, top : top + size, left : left + size]
    out = ndimage.zoom(window, (1, h / size, w / size), order=1, mode="nearest", grid_mode=False)
    return np.clip(out[:, :h, :w], 0.0, 1.0)


def augment(image: np.ndarray, rng: np.random.Generator) -> List[np.ndarray]:
    """Three synthetic images: random crop, random rotation within +/-15 degrees, horizontal flip."""
    angle = float(rng.uniform(-MAX_ROTATION, MAX_ROTATION))
    return [random_crop(image, rng), rotate(image, angle), hflip(image)]


def augment_split(split: Split, seed: int, workers: int = 1) -> Split:
    """
    Training pool of 4x the input size: every original followed by its three
    synthetic images, labels repeated. Output order is the input order for
    any worker count.
    """
    images, labels = split

    def expand(index: int) -> List[np.ndarray]:
        return [images[index], *augment(images[index], sample_rng(seed, index))]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            groups = list(pool.map(expand, range(len(images))))
    else:
        groups = [expand(i) for i in range(len(images))]
    out_images = np.stack([img for group in groups for img in group]) if groups else images
    return out_images.astype(images.dtype, copy=False), np.repeat(labels, 4)


# --------------------------------------------------------------------------
# Fold plans
# --------------------------------------------------------------------------


@dataclass
class FoldPlan:
    """
    Partition of sample indices into ``k`` validation folds.

    Attributes:
        folds: Validation index arrays; together they partition range(n).
    """

    k: int
    folds: List[np.ndarray]
    seed: int
    n_samples: int

    def validation_indices(self, fold: int) -> np.ndarray:
        return self.folds[fold]

    def train_indices(self, fold: int) -> np.ndarray:
        mask = np.ones(self.n_samples, dtype=bool)
        mask[self.folds[fold]] = False
        return np.flatnonzero(mask)


def kfold_split(
    n_samples: int, k: int = 5, seed: int = 0, groups: Optional[Sequence[Union[int, str]]] = None
) -> FoldPlan:
    """
    Shuffled k-fold plan; fold sizes differ by at most one.

    With ``groups`` (e.g. KDEF actor ids) folds are group-disjoint instead,
    and sizes follow the group sizes.
    """
    if k < 2:
        raise ConfigurationError(f"k must be at least 2, got {k}")
    if n_samples < k:
        raise ConfigurationError(f"cannot split {n_samples} samples into {k} folds")
    indices = np.arange(n_samples)
    if groups is None:
        splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
        folds = [np.sort(val) for _, val in splitter.split(indices)]
    else:
        folds = [np.sort(val) for _, val in GroupKFold(n_splits=k).split(indices, groups=groups)]
    return FoldPlan(k=k, folds=folds, seed=seed, n_samples=n_samples)


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class FitResult:
    log: TrainingLog
    run_id: str
    best_state: Dict[str, np.ndarray]
    best_epoch: int
    best_val_acc: float
    adam_state: AdamState
    final_lr: float


def evaluate_split(model: LANMSFF, split: Split, batch_size: int = 64) -> Tuple[float, float]:
    """(mean cross-entropy, accuracy in [0, 1]) in eval mode."""
    images, labels = split
    targets = one_hot(labels, model.config.num_classes)
    total_loss, correct = 0.0, 0
    with no_grad():
        for start in range(0, len(images), batch_size):
            batch = Tensor(images[start : start + batch_size], dtype=model.config.dtype)
            logits = model(batch, "eval")
            loss = cross_entropy(logits, targets[start : start + batch_size])
            total_loss += loss.item() * len(batch.data)
            correct += int((logits.data.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return total_loss / len(images), correct / len(images)


def _check_split(name: str, split: Split, num_classes: int) -> None:
    images, labels = split
    if len(images) == 0:
        raise EmptySplitError(f"{name} split holds no samples")
    if len(images) != len(labels):
        raise SchemaMismatchError(f"{name} split has {len(images)} images but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise SchemaMismatchError(
            f"{name} labels span {labels.min()}..{labels.max()}, model has {num_classes} classes"
        )


def fit(
    model: LANMSFF,
    train: Split,
    val: Split,
    cfg: TrainConfig,
    log: Optional[TrainingLog] = None,
    run_id: str = "run",
    adam_state: Optional[AdamState] = None,
    start_epoch: int = 1,
    restore_best: bool = True,
) -> FitResult:
    """
    Train ``model`` in place.

    Each epoch shuffles the (augmented) training pool with a generator seeded
    by (seed, epoch), draws dropout masks from (seed, epoch, batch), runs Adam
    over mini-batches, evaluates on ``val`` and
    appends one record to ``log``. The weights of the epoch with the highest
    validation accuracy are kept and, with ``restore_best``, loaded back at
    the end. ``adam_state`` and ``start_epoch`` resume an earlier run.

    Raises:
        EmptySplitError: train or val holds no samples.
        SchemaMismatchError: labels outside the model's classes.
        NonFiniteGradientError: a step produced a NaN/Inf gradient.
    """
    num_classes = model.config.num_classes
    _check_split("train", train, num_classes)
    _check_split("val", val, num_classes)
    log = log if log is not None else TrainingLog()
    state = adam_state if adam_state is not None else AdamState()

    pool = augment_split(train, cfg.seed, cfg.workers) if cfg.augment else train
    images, labels = pool
    targets = one_hot(labels, num_classes)
    logger.info("training on %d images (%d originals), validating on %d", len(images), len(train[0]), len(val[0]))

    params = model.parameters()
    lr = cfg.lr0
    # resumed runs replay the schedule over the epochs already logged
    val_losses = [r.val_loss for r in log.for_run(run_id)]
    if val_losses:
        lr = cfg.lr0 * cfg.decay_factor ** len(decay_epochs(val_losses, cfg))

    best_state = state_arrays(model)
    best_epoch, best_acc = 0, -1.0
    for epoch in range(start_epoch, start_epoch + cfg.max_epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(images))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            reseed_dropout(model, cfg.seed, epoch, start // cfg.batch_size)
            batch = Tensor(images[idx], dtype=model.config.dtype)
            with Tape() as tape:
                logits = model(batch, "train")
                loss = cross_entropy(logits, targets[idx])
                grads = backward(loss, tape)
            adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
            model.zero_grad()
            total_loss += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
            logger.debug("epoch %d batch %d loss %.5f", epoch, start // cfg.batch_size, loss.item())

        train_loss, train_acc = total_loss / len(images), correct / len(images)
        val_loss, val_acc = evaluate_split(model, val)
        log.append(
            {
                "run_id": run_id,
                "epoch": epoch,
                "train_loss": train_loss,
                "train_acc": train_acc,
                "val_loss": val_loss,
                "val_acc": val_acc,
                "lr": lr,
            }
        )
        logger.info(
            "epoch %d: train loss %.4f acc %.4f | val loss %.4f acc %.4f | lr %.3g",
            epoch, train_loss, train_acc, val_loss, val_acc, lr,
        )
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = state_arrays(model)
        val_losses.append(val_loss)
        lr = lr_schedule(val_losses, lr, cfg)

    if restore_best:
        load_state_arrays(model, best_state)
    return FitResult(
        log=log,
        run_id=run_id,
        best_state=best_state,
        best_epoch=best_epoch,
        best_val_acc=best_acc,
        adam_state=state,
        final_lr=lr,
    )
