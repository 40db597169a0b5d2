"""Challenge scorers: binary F1, macro AU score, one-vs-rest expression
score, concordance-based VA score, the composite, and the JSON report."""

import json

import numpy as np
import pytest

from mtaffect.errors import ConfigError, InsufficientDataError, LabelError, ShapeError
from mtaffect.metrics import (
    AU_MISSING,
    EXPR_MISSING,
    N_AU,
    N_EXPR,
    VA_MISSING,
    MetricReport,
    evaluate_predictions,
    f1_binary,
    score_au,
    score_ex,
    score_mtl,
    score_va,
)


# ---------------------------------------------------------------------------
# binary F1


def test_f1_perfect():
    assert f1_binary(np.array([1, 0, 1]), np.array([1, 0, 1])) == 1.0


def test_f1_hand_counts():
    # TP=1, FP=1, FN=1 -> 2/4
    assert f1_binary(np.array([1, 1, 0]), np.array([1, 0, 1])) == 0.5


def test_f1_empty_class_convention():
    assert f1_binary(np.zeros(5, dtype=int), np.zeros(5, dtype=int)) == 1.0


def test_f1_validates_inputs():
    with pytest.raises(ShapeError):
        f1_binary(np.zeros(3, dtype=int), np.zeros(4, dtype=int))
    with pytest.raises(LabelError):
        f1_binary(np.array([0, 2]), np.array([0, 1]))


def brute_force_f1(pred, truth):
    tp = fp = fn = 0
    for p, t in zip(pred, truth):
        if p == 1 and t == 1:
            tp += 1
        elif p == 1 and t == 0:
            fp += 1
        elif p == 0 and t == 1:
            fn += 1
    return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def test_f1_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        b = int(rng.integers(1, 200))
        pred = rng.integers(0, 2, size=b)
        truth = rng.integers(0, 2, size=b)
        assert abs(f1_binary(pred, truth) - brute_force_f1(pred, truth)) < 1e-15


# ---------------------------------------------------------------------------
# AU scoring


def test_score_au_perfect():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 2, size=(40, N_AU))
    probs = np.where(labels == 1, 0.9, 0.1)
    f1s, p_au, warnings = score_au(probs, labels)
    assert p_au == 1.0
    assert all(v == 1.0 for v in f1s)


def test_score_au_flipped_is_zero():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 2, size=(40, N_AU))
    # ensure both classes appear per column so no empty-class convention fires
    labels[0] = 1
    labels[1] = 0
    probs = np.where(labels == 1, 0.1, 0.9)
    f1s, p_au, _ = score_au(probs, labels)
    assert p_au == 0.0


def test_score_au_per_column_masking():
    labels = np.full((6, N_AU), AU_MISSING)
    # AU at column 0: valid rows 0..3 with one error
    labels[:4, 0] = [1, 1, 0, 0]
    probs = np.full((6, N_AU), 0.1)
    probs[:4, 0] = [0.9, 0.2, 0.1, 0.8]  # TP, FN, TN, FP -> F1 = 2/(2+1+1)
    f1s, p_au, warnings = score_au(probs, labels)
    assert f1s[0] == 0.5
    assert all(v is None for v in f1s[1:])
    assert p_au == 0.5
    assert len([w for w in warnings if "no valid labels" in w]) == N_AU - 1


def test_score_au_all_missing_returns_none():
    labels = np.full((5, N_AU), AU_MISSING)
    f1s, p_au, warnings = score_au(np.full((5, N_AU), 0.5), labels)
    assert p_au is None
    assert all(v is None for v in f1s)


def test_score_au_empty_class_flagged():
    labels = np.zeros((5, N_AU), dtype=int)
    probs = np.full((5, N_AU), 0.1)
    f1s, p_au, warnings = score_au(probs, labels)
    assert p_au == 1.0
    assert len([w for w in warnings if "convention" in w]) == N_AU


def test_score_au_threshold_validation_and_binarization_edge():
    probs = np.full((4, N_AU), 0.5)
    labels = np.ones((4, N_AU), dtype=int)
    # >= threshold counts as positive
    f1s, p_au, _ = score_au(probs, labels, threshold=0.5)
    assert p_au == 1.0
    with pytest.raises(ConfigError):
        score_au(probs, labels, threshold=0.0)
    with pytest.raises(ConfigError):
        score_au(probs, labels, threshold=1.0)


def test_score_au_complement_symmetry():
    # complementing predictions and labels while flipping the threshold
    # mirrors every confusion cell exactly when no probability sits on
    # either threshold boundary
    rng = np.random.default_rng(3)
    for _ in range(20):
        labels = rng.integers(0, 2, size=(30, N_AU))
        probs = rng.uniform(0.0, 1.0, size=(30, N_AU))
        t = float(rng.uniform(0.2, 0.8))
        probs[np.abs(probs - t) < 1e-9] += 1e-6
        probs[np.abs((1.0 - probs) - (1.0 - t)) < 1e-9] += 1e-6
        _, p1, _ = score_au(probs, labels, threshold=t)
        # complement: swap the roles of the positive and negative class
        comp_probs = 1.0 - probs
        comp_labels = 1 - labels
        swapped = comp_probs.copy()
        # binarize(comp at 1-t with >=) equals NOT binarize(orig at t with >=)
        # only off the boundary; nudge guarantees that
        _, p2, _ = score_au(swapped, comp_labels, threshold=1.0 - t)
        f1a = _f1_manual(probs >= t, labels)
        f1b = _f1_manual(swapped >= 1.0 - t, comp_labels)
        assert abs(p1 - f1a) < 1e-12 and abs(p2 - f1b) < 1e-12


def _f1_manual(bits, labels):
    out = []
    for j in range(labels.shape[1]):
        out.append(brute_force_f1(bits[:, j].astype(int), labels[:, j]))
    return float(np.mean(out))


# ---------------------------------------------------------------------------
# expression scoring


def test_score_ex_perfect():
    labels = np.array([0, 1, 2, 3, 4, 5, 6, 7, 0, 3])
    f1s, p_ex, _ = score_ex(labels.copy(), labels)
    assert p_ex == 1.0


def test_score_ex_one_vs_rest_counts():
    labels = np.array([0, 0, 1, 1])
    pred = np.array([0, 1, 1, 0])
    f1s, p_ex, warnings = score_ex(pred, labels)
    # class 0: TP=1 FP=1 FN=1 -> 0.5; class 1 likewise; classes 2..7 empty -> 1
    assert f1s[0] == 0.5 and f1s[1] == 0.5
    assert all(v == 1.0 for v in f1s[2:])
    assert abs(p_ex - (0.5 * 2 + 6.0) / 8.0) < 1e-12
    assert len([w for w in warnings if "convention" in w]) == 6


def test_score_ex_masking():
    labels = np.array([0, EXPR_MISSING, 1, EXPR_MISSING])
    pred = np.array([0, 5, 1, 6])
    f1s, p_ex, _ = score_ex(pred, labels)
    assert p_ex == 1.0  # the two valid rows are both right


def test_score_ex_no_valid_labels():
    f1s, p_ex, warnings = score_ex(np.array([0, 1]), np.array([EXPR_MISSING] * 2))
    assert p_ex is None
    assert all(v is None for v in f1s)
    assert warnings


def test_score_ex_rejects_bad_values():
    with pytest.raises(LabelError):
        score_ex(np.array([8]), np.array([0]))
    with pytest.raises(LabelError):
        score_ex(np.array([0]), np.array([9]))


def test_score_ex_chance_level_monte_carlo():
    # uniform-random predictions on balanced labels land near chance,
    # comfortably below 0.2 for 8 classes
    rng = np.random.default_rng(4)
    b = 10000
    labels = rng.integers(0, N_EXPR, size=b)
    pred = rng.integers(0, N_EXPR, size=b)
    _, p_ex, _ = score_ex(pred, labels)
    assert p_ex < 0.2


def test_score_ex_permutation_invariance():
    rng = np.random.default_rng(5)
    labels = rng.integers(0, N_EXPR, size=60)
    pred = rng.integers(0, N_EXPR, size=60)
    perm = rng.permutation(60)
    _, a, _ = score_ex(pred, labels)
    _, b, _ = score_ex(pred[perm], labels[perm])
    assert a == b


# ---------------------------------------------------------------------------
# VA scoring


def test_score_va_perfect():
    rng = np.random.default_rng(6)
    t = rng.uniform(-1, 1, size=(10, 2))
    ccc_v, ccc_a, p_va = score_va(t.copy(), t)
    assert abs(p_va - 1.0) < 1e-12


def test_score_va_masks_sentinel_rows():
    rng = np.random.default_rng(7)
    t = rng.uniform(-1, 1, size=(10, 2))
    pred = t + 0.05
    labels = t.copy()
    labels[3] = [VA_MISSING, VA_MISSING]
    labels[7] = [VA_MISSING, VA_MISSING]
    keep = np.ones(10, dtype=bool)
    keep[[3, 7]] = False
    want_v, want_a, want_p = score_va(pred[keep], t[keep])
    got_v, got_a, got_p = score_va(pred, labels)
    assert got_v == want_v and got_a == want_a and got_p == want_p


def test_score_va_needs_two_valid_rows():
    labels = np.full((5, 2), VA_MISSING)
    labels[0] = [0.1, 0.2]
    with pytest.raises(InsufficientDataError):
        score_va(np.zeros((5, 2)), labels)


def test_score_va_constant_prediction_zero():
    rng = np.random.default_rng(8)
    t = rng.uniform(-1, 1, size=(10, 2))
    _, _, p_va = score_va(np.zeros((10, 2)), t)
    assert p_va == 0.0


# ---------------------------------------------------------------------------
# composite and report


def test_score_mtl_sums():
    assert abs(score_mtl(0.414, 0.322, 0.479) - 1.215) < 1e-12
    assert abs(score_mtl(0.456, 0.333, 0.499) - 1.288) < 1e-12
    assert score_mtl(0.0, 0.0, 0.0) == 0.0


def test_score_mtl_requires_all_parts():
    with pytest.raises(ConfigError):
        score_mtl(None, 0.3, 0.4)


def test_evaluate_predictions_full_report():
    rng = np.random.default_rng(9)
    b = 50
    au_labels = rng.integers(0, 2, size=(b, N_AU))
    au_probs = np.where(au_labels == 1, 0.9, 0.1)
    expr_labels = rng.integers(0, N_EXPR, size=b)
    va_labels = rng.uniform(-1, 1, size=(b, 2))
    report = evaluate_predictions(au_probs, expr_labels.copy(), va_labels.copy(),
                                  au_labels, expr_labels, va_labels)
    assert report.p_au == 1.0 and report.p_ex == 1.0
    assert abs(report.p_va - 1.0) < 1e-12
    assert abs(report.p_mtl - 3.0) < 1e-12
    # report invariants
    assert abs(report.p_au - np.mean(report.f1_per_au)) < 1e-12
    assert abs(report.p_ex - np.mean(report.f1_per_expr)) < 1e-12
    assert abs(report.p_va - (report.ccc_valence + report.ccc_arousal) / 2) < 1e-12
    assert abs(report.p_mtl - (report.p_au + report.p_ex + report.p_va)) < 1e-12


def test_evaluate_predictions_null_propagation():
    rng = np.random.default_rng(10)
    b = 20
    au_labels = np.full((b, N_AU), AU_MISSING)
    expr_labels = rng.integers(0, N_EXPR, size=b)
    va_labels = rng.uniform(-1, 1, size=(b, 2))
    report = evaluate_predictions(np.full((b, N_AU), 0.5), expr_labels.copy(),
                                  va_labels.copy(), au_labels, expr_labels, va_labels)
    assert report.p_au is None
    assert report.p_ex == 1.0
    assert report.p_mtl is None
    assert report.warnings


def test_evaluate_predictions_va_all_missing_is_null_not_error():
    rng = np.random.default_rng(11)
    b = 20
    au_labels = rng.integers(0, 2, size=(b, N_AU))
    expr_labels = rng.integers(0, N_EXPR, size=b)
    report = evaluate_predictions(np.where(au_labels == 1, 0.9, 0.1),
                                  expr_labels.copy(), np.zeros((b, 2)),
                                  au_labels, expr_labels,
                                  np.full((b, 2), VA_MISSING))
    assert report.p_va is None and report.ccc_valence is None
    assert report.p_mtl is None


def test_report_json_round_trip():
    rng = np.random.default_rng(12)
    b = 30
    au_labels = rng.integers(0, 2, size=(b, N_AU))
    expr_labels = rng.integers(0, N_EXPR, size=b)
    va_labels = rng.uniform(-1, 1, size=(b, 2))
    report = evaluate_predictions(rng.uniform(size=(b, N_AU)),
                                  rng.integers(0, N_EXPR, size=b),
                                  rng.uniform(-1, 1, size=(b, 2)),
                                  au_labels, expr_labels, va_labels)
    doc = json.loads(report.to_json())
    for key in ("f1_per_au", "f1_per_expr", "ccc_valence", "ccc_arousal",
                "p_au", "p_ex", "p_va", "p_mtl", "warnings"):
        assert key in doc
    assert doc["p_au"] == report.p_au
    assert len(doc["f1_per_au"]) == N_AU
    assert len(doc["f1_per_expr"]) == N_EXPR
    # fractions, not percentages
    assert 0.0 <= doc["p_au"] <= 1.0
