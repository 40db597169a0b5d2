"""Staged optimization: plain SGD with optional sharpness-aware steps.

The protocol trains one task per stage: first the AU branch, then the
expression head plus attention on top of the frozen AU branch (unfreezable
by config), and the VA head independently. The learning rate follows a
cosine schedule stepped once per epoch, and every run is a pure function of
its config seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import (
    Dataset,
    au_label_matrix,
    expr_label_array,
    feature_matrix,
    task_view,
    va_label_matrix,
    train_batches,
)
from .errors import ConfigError, InsufficientDataError, NumericalError
from .losses import au_weights_from_rates
from .metrics import score_au, score_ex, score_va
from .model import Model, STAGE_DEFAULT_GROUPS

log = logging.getLogger(__name__)

STAGES = ("au", "ex", "va")


@dataclass
class TrainConfig:
    stage: str
    epochs: int = 10
    lr0: float = 1e-3
    lr_min: float = 0.0
    batch_size: int = 256
    weight_decay: float = 1e-4
    # None resolves to the stage default: 0.05 for the AU stage, off elsewhere
    sam_rho: float | None = None
    momentum: float = 0.0
    seed: int = 0
    freeze: tuple = ()
    unfreeze_anfl: bool = False
    val_fraction: float = 0.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be nonnegative, got {self.epochs}")
        if self.lr0 <= 0.0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.lr_min <= self.lr0:
            raise ConfigError(f"lr_min must lie in [0, lr0], got {self.lr_min}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.sam_rho is not None and self.sam_rho < 0.0:
            raise ConfigError(f"sam_rho must be nonnegative, got {self.sam_rho}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        self.freeze = tuple(self.freeze)
        bad = [g for g in self.freeze if g not in ("anfl", "ex", "attn", "va")]
        if bad:
            raise ConfigError(f"unknown parameter groups in freeze: {bad}")
        if self.unfreeze_anfl and self.stage != "ex":
            raise ConfigError("unfreeze_anfl only applies to the ex stage")

    @property
    def resolved_sam_rho(self) -> float:
        if self.sam_rho is not None:
            return self.sam_rho
        return 0.05 if self.stage == "au" else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze"] = list(self.freeze)
        return d


# ---------------------------------------------------------------------------
# optimizer primitives


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    """lr_min + 0.5 (lr0 - lr_min) (1 + cos(pi step / total_steps))."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(params: dict, grads: dict, lr: float, weight_decay: float = 0.0,
             velocity: dict | None = None, momentum: float = 0.0) -> dict:
    """In-place descent: theta <- theta - lr (g + weight_decay theta).

    Only names present in grads are touched. momentum > 0 folds the
    decay-adjusted gradient into a velocity buffer first.
    """
    for name, g in grads.items():
        p = params[name]
        step_dir = g + weight_decay * p
        if momentum > 0.0:
            v = velocity.setdefault(name, np.zeros_like(p))
            v *= momentum
            v += step_dir
            step_dir = v
        p -= lr * step_dir
    return params


def grad_global_norm(grads: dict) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def sam_step(params: dict, grad_fn, lr: float, rho: float,
             weight_decay: float = 0.0, eps: float = 1e-12,
             velocity: dict | None = None, momentum: float = 0.0) -> float:
    """One sharpness-aware step. Returns the loss at the unperturbed point.

    grad_fn(update_running: bool) -> (loss, grads) evaluated at the current
    parameters. The ascent offset is rho * g / (||g||_2 + eps) with the norm
    taken globally over all unfrozen tensors; gradients are re-evaluated at
    the perturbed point and the descent is applied at the original one. A
    zero gradient norm degrades to a plain SGD step with a warning.
    """
    if rho < 0.0:
        raise ConfigError(f"rho must be nonnegative, got {rho}")
    loss, grads = grad_fn(update_running=True)
    norm = grad_global_norm(grads)
    if norm == 0.0:
        log.warning("sam_step: zero gradient norm, falling back to plain SGD")
        sgd_step(params, grads, lr, weight_decay, velocity, momentum)
        return loss
    scale = rho / (norm + eps)
    offsets = {name: g * scale for name, g in grads.items()}
    for name, e in offsets.items():
        params[name] += e
    try:
        _, grads_hat = grad_fn(update_running=False)
    finally:
        for name, e in offsets.items():
            params[name] -= e
    sgd_step(params, grads_hat, lr, weight_decay, velocity, momentum)
    return loss


# ---------------------------------------------------------------------------
# stage plumbing


def stage_labels(samples: list, stage: str):
    if stage == "au":
        return au_label_matrix(samples)
    if stage == "ex":
        return expr_label_array(samples)
    return va_label_matrix(samples)


def backward(model: Model, stage: str, x: np.ndarray, labels,
             train_anfl: bool = False, update_running: bool = True,
             fixed_graphs: np.ndarray | None = None):
    """Loss and gradients of one stage on one batch, keyed by registry name."""
    if stage == "au":
        return model.au_stage(x, labels, fixed_graphs=fixed_graphs)
    if stage == "ex":
        return model.ex_stage(x, np.asarray(labels), train_anfl=train_anfl,
                              fixed_graphs=fixed_graphs)
    if stage == "va":
        return model.va_stage(x, labels, update_running=update_running)
    raise ConfigError(f"unknown stage {stage!r}")


def _fit_stage_weights(model: Model, ds: Dataset, stage: str) -> None:
    if stage == "au":
        model.weights.au_rates = ds.au_rates
        model.weights.au_weights = au_weights_from_rates(ds.au_rates)
    elif stage == "ex":
        model.weights.ex_rates = ds.expr_freqs
        model.weights.ex_weights = au_weights_from_rates(ds.expr_freqs)


def _score_stage(model: Model, samples: list, stage: str) -> float | None:
    x = feature_matrix(samples)
    if stage == "au":
        probs = model.au_probs(x)
        _, p_au, _ = score_au(probs, au_label_matrix(samples))
        return p_au
    if stage == "ex":
        _, decision = model.ex_forward(x)
        _, p_ex, _ = score_ex(decision.argmax(axis=1), expr_label_array(samples))
        return p_ex
    _, _, va = model.predict(x)
    _, _, p_va = score_va(va, va_label_matrix(samples))
    return p_va


def trainable_names(model: Model, config: TrainConfig) -> list:
    groups = set(STAGE_DEFAULT_GROUPS[config.stage])
    if config.stage == "ex" and config.unfreeze_anfl:
        if not model.heads.use_attention:
            raise ConfigError(
                "unfreeze_anfl needs the attention path; without it the ex loss "
                "does not depend on the AU branch")
        groups.add("anfl")
    groups -= set(config.freeze)
    names = model.group_names(groups)
    if not names:
        raise ConfigError(f"stage {config.stage}: every parameter group is frozen")
    return names


def train_stage(ds: Dataset, model: Model, config: TrainConfig,
                val_samples: list | None = None):
    """Run one stage of the protocol. Returns a per-epoch history list.

    Each history row has epoch, loss (mean over that epoch's batches), lr,
    and p_task (the stage's challenge score on the validation samples, or on
    the training view when none are supplied).
    """
    view = task_view(ds, config.stage)
    if len(view) < config.batch_size:
        raise InsufficientDataError(
            f"stage {config.stage}: task view has {len(view)} samples, "
            f"batch size is {config.batch_size}")
    _fit_stage_weights(model, ds, config.stage)
    names = trainable_names(model, config)
    params = model.named_arrays()
    rng = np.random.default_rng(config.seed)

    if val_samples is None and config.val_fraction > 0.0:
        perm = rng.permutation(len(view))
        n_val = int(round(config.val_fraction * len(view)))
        n_val = max(1, min(n_val, len(view) - config.batch_size))
        val_samples = [view[i] for i in perm[:n_val]]
        view = [view[i] for i in perm[n_val:]]
        if len(view) < config.batch_size:
            raise InsufficientDataError(
                f"stage {config.stage}: {len(view)} samples left after the "
                f"validation split, batch size is {config.batch_size}")
    eval_samples = val_samples if val_samples is not None else view

    x_all = feature_matrix(view)
    labels_all = stage_labels(view, config.stage)
    rho = config.resolved_sam_rho
    velocity: dict = {}
    history = []
    train_anfl = config.stage == "ex" and config.unfreeze_anfl

    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr0, config.lr_min)
        batch_losses = []
        for bi, idx in enumerate(train_batches(len(view), config.batch_size, rng)):
            xb = x_all[idx]
            yb = labels_all[idx]

            def grad_fn(update_running: bool = True):
                loss, grads = backward(model, config.stage, xb, yb,
                                       train_anfl=train_anfl,
                                       update_running=update_running)
                return loss, {n: g for n, g in grads.items() if n in names}

            if rho > 0.0:
                loss = sam_step(params, grad_fn, lr, rho, config.weight_decay,
                                velocity=velocity, momentum=config.momentum)
            else:
                loss, grads = grad_fn()
                sgd_step(params, grads, lr, config.weight_decay,
                         velocity=velocity, momentum=config.momentum)
            if not math.isfinite(loss):
                raise NumericalError(
                    f"stage {config.stage}: non-finite loss in epoch {epoch}, "
                    f"batch {bi}")
            batch_losses.append(loss)
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(batch_losses)),
            "lr": lr,
            "p_task": _score_stage(model, eval_samples, config.stage),
        })

    if config.stage not in model.stages_completed:
        model.stages_completed.append(config.stage)
    return history
