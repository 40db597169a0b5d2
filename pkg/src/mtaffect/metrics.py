"""Challenge scoring: macro F1 for AUs and expressions, CCC for VA.

P_AU is the macro F1 over the 12 AUs after thresholding activations, P_EX
the macro one-vs-rest F1 over the 8 expression classes, P_VA the mean of
the valence and arousal CCCs, and the combined score is their plain sum.
All scores are fractions, never percentages. A class whose confusion counts
are all zero scores F1 = 1 by convention; every such case is flagged in the
report's warnings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InsufficientDataError, LabelError, ShapeError
from .graph import AU_LABELS
from .losses import ccc

N_AU = 12
N_EXPR = 8

EXPR_LABELS = ("neutral", "anger", "disgust", "fear",
               "happiness", "sadness", "surprise", "other")

AU_MISSING = -1
EXPR_MISSING = -1
VA_MISSING = -5.0


def f1_binary(pred_bits: np.ndarray, true_bits: np.ndarray) -> float:
    """Binary F1 = 2TP / (2TP + FP + FN); empty class (all counts 0) -> 1."""
    pred_bits = np.asarray(pred_bits)
    true_bits = np.asarray(true_bits)
    if pred_bits.shape != true_bits.shape:
        raise ShapeError(
            f"f1: pred shape {pred_bits.shape} does not match true shape {true_bits.shape}")
    for name, bits in (("pred", pred_bits), ("true", true_bits)):
        if not np.all((bits == 0) | (bits == 1)):
            raise LabelError(f"f1: {name} bits must be 0 or 1")
    tp = int(np.sum((pred_bits == 1) & (true_bits == 1)))
    fp = int(np.sum((pred_bits == 1) & (true_bits == 0)))
    fn = int(np.sum((pred_bits == 0) & (true_bits == 1)))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def score_au(pred_probs: np.ndarray, au_labels: np.ndarray, threshold: float = 0.5):
    """Per-AU F1 at the given threshold plus their macro average.

    au_labels entries are 0, 1, or the missing sentinel; each AU is scored
    over its own valid rows. Returns (f1_per_au, p_au, warnings) where an AU
    with no valid labels contributes None and is excluded from the macro.
    """
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    au_labels = np.asarray(au_labels)
    if pred_probs.ndim != 2 or pred_probs.shape[1] != N_AU:
        raise ShapeError(f"score_au: predictions must be [B, {N_AU}], got {pred_probs.shape}")
    if au_labels.shape != pred_probs.shape:
        raise ShapeError(
            f"score_au: labels shape {au_labels.shape} does not match "
            f"predictions shape {pred_probs.shape}")
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"score_au: threshold must lie in (0, 1), got {threshold}")
    f1s: list[float | None] = []
    warnings: list[str] = []
    for j in range(N_AU):
        valid = au_labels[:, j] != AU_MISSING
        if not np.any(valid):
            f1s.append(None)
            warnings.append(f"{AU_LABELS[j]}: no valid labels, excluded from macro average")
            continue
        bits = (pred_probs[valid, j] >= threshold).astype(np.int64)
        truth = au_labels[valid, j].astype(np.int64)
        value = f1_binary(bits, truth)
        if bits.sum() == 0 and truth.sum() == 0:
            warnings.append(f"{AU_LABELS[j]}: empty class, F1 = 1 by convention")
        f1s.append(value)
    present = [v for v in f1s if v is not None]
    p_au = float(np.mean(present)) if present else None
    return f1s, p_au, warnings


def score_ex(pred_classes: np.ndarray, expr_labels: np.ndarray):
    """One-vs-rest F1 per expression class plus their macro average.

    Rows with the missing sentinel are dropped. Returns
    (f1_per_expr, p_ex, warnings).
    """
    pred_classes = np.asarray(pred_classes)
    expr_labels = np.asarray(expr_labels)
    if pred_classes.shape != expr_labels.shape or pred_classes.ndim != 1:
        raise ShapeError(
            f"score_ex: predictions shape {pred_classes.shape} and labels "
            f"shape {expr_labels.shape} must be equal vectors")
    if not np.all((pred_classes >= 0) & (pred_classes < N_EXPR)):
        raise LabelError(f"score_ex: predicted classes must lie in [0, {N_EXPR})")
    valid = expr_labels != EXPR_MISSING
    if not np.any(valid):
        warnings = ["expression: no valid labels"]
        return [None] * N_EXPR, None, warnings
    pred = pred_classes[valid]
    truth = expr_labels[valid]
    if not np.all((truth >= 0) & (truth < N_EXPR)):
        raise LabelError(f"score_ex: labels must lie in [0, {N_EXPR}) or be missing")
    f1s: list[float | None] = []
    warnings: list[str] = []
    for c in range(N_EXPR):
        tp = int(np.sum((pred == c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        fn = int(np.sum((truth == c) & (pred != c)))
        if tp + fp + fn == 0:
            warnings.append(f"expression {EXPR_LABELS[c]}: empty class, F1 = 1 by convention")
            f1s.append(1.0)
        else:
            f1s.append(2.0 * tp / (2.0 * tp + fp + fn))
    p_ex = float(np.mean([v for v in f1s]))
    return f1s, p_ex, warnings


def score_va(pred: np.ndarray, va_labels: np.ndarray):
    """CCC of valence and arousal over rows with labels present.

    Returns (ccc_valence, ccc_arousal, p_va) with p_va their mean.
    """
    pred = np.asarray(pred, dtype=np.float64)
    va_labels = np.asarray(va_labels, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[1] != 2:
        raise ShapeError(f"score_va: predictions must be [B, 2], got {pred.shape}")
    if va_labels.shape != pred.shape:
        raise ShapeError(
            f"score_va: labels shape {va_labels.shape} does not match "
            f"predictions shape {pred.shape}")
    valid = va_labels[:, 0] != VA_MISSING
    if int(valid.sum()) < 2:
        raise InsufficientDataError(
            f"score_va: needs at least 2 labeled rows, got {int(valid.sum())}")
    ccc_v = ccc(pred[valid, 0], va_labels[valid, 0])
    ccc_a = ccc(pred[valid, 1], va_labels[valid, 1])
    return ccc_v, ccc_a, (ccc_v + ccc_a) / 2.0


def score_mtl(p_au: float, p_ex: float, p_va: float) -> float:
    """Combined challenge score: P_AU + P_EX + P_VA."""
    for name, v in (("p_au", p_au), ("p_ex", p_ex), ("p_va", p_va)):
        if v is None:
            raise ConfigError(f"score_mtl: {name} is missing")
    return float(p_au) + float(p_ex) + float(p_va)


@dataclass
class MetricReport:
    """Everything the evaluator writes, scores as fractions."""

    f1_per_au: list
    f1_per_expr: list
    ccc_valence: float | None
    ccc_arousal: float | None
    p_au: float | None
    p_ex: float | None
    p_va: float | None
    p_mtl: float | None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "f1_per_au": self.f1_per_au,
            "f1_per_expr": self.f1_per_expr,
            "ccc_valence": self.ccc_valence,
            "ccc_arousal": self.ccc_arousal,
            "p_au": self.p_au,
            "p_ex": self.p_ex,
            "p_va": self.p_va,
            "p_mtl": self.p_mtl,
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate_predictions(au_probs: np.ndarray, expr_pred: np.ndarray,
                         va_pred: np.ndarray, au_labels: np.ndarray,
                         expr_labels: np.ndarray, va_labels: np.ndarray,
                         threshold: float = 0.5) -> MetricReport:
    """Score all three tasks against sentinel-encoded labels.

    A task whose labels are entirely missing is reported as null; p_mtl is
    null unless all three sub-scores are present.
    """
    warnings: list[str] = []
    f1_au, p_au, w = score_au(au_probs, au_labels, threshold)
    warnings.extend(w)
    f1_ex, p_ex, w = score_ex(expr_pred, expr_labels)
    warnings.extend(w)
    valid_va = int(np.sum(np.asarray(va_labels, dtype=np.float64)[:, 0] != VA_MISSING))
    if valid_va >= 2:
        ccc_v, ccc_a, p_va = score_va(va_pred, va_labels)
    else:
        ccc_v = ccc_a = p_va = None
        warnings.append(f"valence-arousal: {valid_va} labeled row(s), scores omitted")
    if p_au is None:
        warnings.append("action units: no valid labels, p_au omitted")
    present = all(v is not None for v in (p_au, p_ex, p_va))
    p_mtl = score_mtl(p_au, p_ex, p_va) if present else None
    return MetricReport(
        f1_per_au=f1_au, f1_per_expr=f1_ex,
        ccc_valence=ccc_v, ccc_arousal=ccc_a,
        p_au=p_au, p_ex=p_ex, p_va=p_va, p_mtl=p_mtl,
        warnings=warnings,
    )
