"""Task losses and inverse-frequency class weights.

AU detection uses a weighted asymmetric binary loss whose negative branch
carries an extra predicted-probability factor, expression recognition uses
inverse-frequency weighted cross-entropy on the attention-weighted logits,
and valence-arousal regression maximizes concordance (1 - CCC per output).
All reductions over a batch are means; missing-label masking happens before
values reach the single-sample ops.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InsufficientDataError, LabelError, ShapeError
from .linalg import as_matrix, as_vector, clamp_prob

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# class weights


def au_weights_from_rates(rates: np.ndarray) -> np.ndarray:
    """Inverse-frequency weights: w_i = N * (1/r_i) / sum_j (1/r_j).

    Weights sum to N (mean exactly 1). rates must be occurrence fractions in
    (0, 1]; a class absent from the training data has no finite inverse
    frequency and is rejected.
    """
    rates = np.asarray(rates, dtype=np.float64)
    if rates.ndim != 1 or rates.shape[0] == 0:
        raise ShapeError(f"rates must be a non-empty vector, got shape {rates.shape}")
    if not np.all(np.isfinite(rates)) or np.any(rates <= 0.0) or np.any(rates > 1.0):
        raise LabelError(
            "rates must lie in (0, 1]: a class absent from training data cannot be weighted")
    inv = 1.0 / rates
    return rates.shape[0] * inv / inv.sum()


@dataclass
class ClassWeights:
    """Per-task loss weights, each None when that task was never fitted."""

    au_weights: np.ndarray | None = None
    ex_weights: np.ndarray | None = None
    au_rates: np.ndarray | None = None
    ex_rates: np.ndarray | None = None

    def __post_init__(self):
        for name in ("au_weights", "ex_weights", "au_rates", "ex_rates"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float64))
        for name in ("au_weights", "ex_weights"):
            w = getattr(self, name)
            if w is None:
                continue
            if np.any(w <= 0.0):
                raise ConfigError(f"{name} must be positive")
            if abs(w.mean() - 1.0) > 1e-9:
                raise ConfigError(f"{name} must have mean 1, got {w.mean()!r}")


# ---------------------------------------------------------------------------
# AU loss


def weighted_asymmetric_loss(pred: np.ndarray, target: np.ndarray, w: np.ndarray,
                             asymmetric: bool = True) -> float:
    """-(1/N) sum_i w_i [y_i log p_i + (1 - y_i) p_i log(1 - p_i)].

    The extra p_i factor on the negative branch is the asymmetry; with
    asymmetric=False and unit weights this is plain mean binary
    cross-entropy. Probabilities are clamped away from 0 and 1 before logs.
    """
    pred = as_vector(pred, "pred")
    target = as_vector(target, "target")
    w = as_vector(w, "w")
    if not pred.shape == target.shape == w.shape:
        raise ShapeError(
            f"asymmetric loss: shapes differ: pred {pred.shape}, "
            f"target {target.shape}, w {w.shape}")
    if not np.all((target == 0.0) | (target == 1.0)):
        raise LabelError(
            "asymmetric loss: target entries must be 0 or 1 "
            "(missing labels are masked upstream)")
    loss, _ = _asymmetric_terms(pred[None, :], target[None, :], w,
                                np.ones_like(pred[None, :], dtype=bool), asymmetric)
    return float(loss)


def _asymmetric_terms(pred, target, w, mask, asymmetric: bool = True):
    """Masked batch version. pred/target/mask: [B, N], w: [N].

    Returns (mean loss over rows, d loss / d pred). Masked entries
    contribute nothing; the per-sample divisor stays N.
    """
    b, n = pred.shape
    p = clamp_prob(pred)
    log_p = np.log(p)
    log_1p = np.log(1.0 - p)
    neg_factor = p if asymmetric else 1.0
    terms = target * log_p + (1.0 - target) * neg_factor * log_1p
    terms = np.where(mask, terms, 0.0)
    loss = -(terms * w).sum() / (n * b)

    if asymmetric:
        d_neg = log_1p - p / (1.0 - p)
    else:
        d_neg = -1.0 / (1.0 - p)
    d_terms = target / p + (1.0 - target) * d_neg
    # where the clamp bit, the loss is locally flat in pred
    unclamped = pred == p
    d_pred = np.where(mask & unclamped, -(w * d_terms) / (n * b), 0.0)
    return loss, d_pred


# ---------------------------------------------------------------------------
# expression loss


def weighted_cross_entropy(weighted_logits: np.ndarray, target: int,
                           class_weights: np.ndarray) -> float:
    """-P[target] * log softmax(weighted_logits)[target] for one sample."""
    weighted_logits = as_vector(weighted_logits, "weighted_logits")
    class_weights = as_vector(class_weights, "class_weights")
    c = weighted_logits.shape[0]
    if class_weights.shape[0] != c:
        raise ShapeError(
            f"cross entropy: {class_weights.shape[0]} class weights for {c} logits")
    if np.any(class_weights <= 0.0):
        raise ConfigError("cross entropy: class weights must be positive")
    target = int(target)
    if not 0 <= target < c:
        raise LabelError(f"cross entropy: target {target} outside [0, {c})")
    loss, _ = _cross_entropy_batch(weighted_logits[None, :],
                                   np.array([target]), class_weights)
    return float(loss)


def _cross_entropy_batch(logits, targets, class_weights):
    """Mean weighted cross-entropy over rows. Returns (loss, d logits)."""
    b, _ = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(b)
    p_t = class_weights[targets]
    loss = -(p_t * log_probs[rows, targets]).sum() / b
    soft = np.exp(log_probs)
    d_logits = soft * p_t[:, None]
    d_logits[rows, targets] -= p_t
    return loss, d_logits / b


# ---------------------------------------------------------------------------
# concordance correlation


def ccc(x: np.ndarray, y: np.ndarray) -> float:
    """Concordance correlation: 2 s_xy / (s_x^2 + s_y^2 + (mean_x - mean_y)^2).

    Population moments (divide by B). When both sequences are constant with
    equal means the ratio is 0/0; that degenerate case returns 0 by
    convention and logs a warning.
    """
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    if x.shape != y.shape:
        raise ShapeError(f"ccc: x shape {x.shape} does not match y shape {y.shape}")
    if x.shape[0] < 2:
        raise InsufficientDataError(f"ccc needs at least 2 points, got {x.shape[0]}")
    mx, my = x.mean(), y.mean()
    vx = x.var()
    vy = y.var()
    sxy = ((x - mx) * (y - my)).mean()
    den = vx + vy + (mx - my) ** 2
    if den == 0.0:
        log.warning("ccc: both sequences constant with equal means; returning 0 by convention")
        return 0.0
    return float(2.0 * sxy / den)


def ccc_grad_x(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of ccc(x, y) with respect to x (0 on the degenerate branch)."""
    b = x.shape[0]
    mx, my = x.mean(), y.mean()
    vx = x.var()
    vy = y.var()
    sxy = ((x - mx) * (y - my)).mean()
    dm = mx - my
    den = vx + vy + dm ** 2
    if den == 0.0:
        return np.zeros_like(x)
    return (2.0 / (b * den ** 2)) * ((y - my) * den - 2.0 * sxy * ((x - mx) + dm))


def va_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """(1 - CCC_valence) + (1 - CCC_arousal) over a batch of [B, 2] pairs."""
    pred = as_matrix(pred, "pred")
    target = as_matrix(target, "target")
    if pred.shape != target.shape:
        raise ShapeError(
            f"va loss: pred shape {pred.shape} does not match target shape {target.shape}")
    if pred.shape[1] != 2:
        raise ShapeError(f"va loss: expected 2 columns, got {pred.shape[1]}")
    return float(sum(1.0 - ccc(pred[:, j], target[:, j]) for j in (0, 1)))


def va_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d va_loss / d pred, column by column."""
    d = np.zeros_like(pred)
    for j in (0, 1):
        d[:, j] = -ccc_grad_x(pred[:, j], target[:, j])
    return d
