"""The assembled multi-task model and its checkpoint format.

Holds the AU branch and both heads, exposes every trainable tensor through
a flat name -> array registry (the optimizers work on that view), computes
per-stage losses with hand-derived gradients, and round-trips through a
deterministic JSON checkpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, InsufficientDataError, LabelError, ShapeError
from .graph import AnflParams, anfl_backward, anfl_forward
from .heads import (
    HeadParams,
    _cross_attention_backward,
    _cross_attention_cached,
    _va_head_backward,
    _va_head_cached,
    ex_logits_batch,
)
from .linalg import BatchNormState, affine_backward, as_matrix
from .losses import ClassWeights, _asymmetric_terms, _cross_entropy_batch, va_loss, va_loss_grad
from .metrics import AU_MISSING, EXPR_MISSING, VA_MISSING

CHECKPOINT_FORMAT = "mtaffect-checkpoint-v1"

PARAM_GROUPS = ("anfl", "ex", "attn", "va")

STAGE_DEFAULT_GROUPS = {"au": ("anfl",), "ex": ("ex", "attn"), "va": ("va",)}


@dataclass
class ModelDims:
    feat_dim: int
    node_dim: int = 64
    d_att: int = 32
    n_nodes: int = 12
    n_classes: int = 8
    k: int = 3
    use_attention: bool = True
    va_use_bn: bool = True

    def __post_init__(self):
        for name in ("feat_dim", "node_dim", "d_att", "n_nodes", "n_classes", "k"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not 1 <= self.k <= self.n_nodes - 1:
            raise ConfigError(
                f"k must lie in [1, n_nodes-1] = [1, {self.n_nodes - 1}], got {self.k}")

    def to_dict(self) -> dict:
        return {
            "feat_dim": self.feat_dim, "node_dim": self.node_dim,
            "d_att": self.d_att, "n_nodes": self.n_nodes,
            "n_classes": self.n_classes, "k": self.k,
            "use_attention": self.use_attention, "va_use_bn": self.va_use_bn,
        }


@dataclass
class Model:
    dims: ModelDims
    anfl: AnflParams
    heads: HeadParams
    weights: ClassWeights = field(default_factory=ClassWeights)
    stages_completed: list = field(default_factory=list)
    seed: int = 0

    @classmethod
    def init(cls, dims: ModelDims, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        anfl = AnflParams.init(rng, dims.feat_dim, dims.node_dim, dims.n_nodes, dims.k)
        heads = HeadParams.init(rng, dims.feat_dim, dims.n_nodes, dims.n_classes,
                                dims.d_att, dims.use_attention, dims.va_use_bn)
        return cls(dims=dims, anfl=anfl, heads=heads, seed=seed)

    # -- parameter registry --------------------------------------------------

    def named_arrays(self) -> dict:
        """Every trainable tensor keyed by a stable dotted name.

        Batchnorm running statistics are state, not parameters, and are
        deliberately absent.
        """
        out = {
            "anfl.au_w": self.anfl.au_w,
            "anfl.au_b": self.anfl.au_b,
            "anfl.gcn_w": self.anfl.gcn_w,
            "anfl.anchors": self.anfl.anchors,
            "ex.w": self.heads.ex_w,
            "ex.b": self.heads.ex_b,
            "va.w": self.heads.va_w,
            "va.b": self.heads.va_b,
        }
        if self.heads.use_attention:
            out["attn.q"] = self.heads.attn_q
            out["attn.k"] = self.heads.attn_k
            out["attn.v"] = self.heads.attn_v
        if self.heads.va_bn is not None:
            out["va.gamma"] = self.heads.va_bn.gamma
            out["va.beta"] = self.heads.va_bn.beta
        return out

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def group_names(self, groups) -> list:
        return [n for n in self.named_arrays() if self.group_of(n) in groups]

    def set_array(self, name: str, value: np.ndarray) -> None:
        group, attr = name.split(".", 1)
        value = np.asarray(value, dtype=np.float64)
        if group == "anfl":
            setattr(self.anfl, attr, value)
        elif group == "ex":
            setattr(self.heads, f"ex_{attr}", value)
        elif group == "attn":
            setattr(self.heads, f"attn_{attr}", value)
        elif group == "va":
            if attr in ("gamma", "beta"):
                setattr(self.heads.va_bn, attr, value)
            else:
                setattr(self.heads, f"va_{attr}", value)
        else:
            raise ConfigError(f"unknown parameter {name!r}")

    # -- forward -------------------------------------------------------------

    def au_probs(self, x: np.ndarray) -> np.ndarray:
        return anfl_forward(x, self.anfl).act

    def ex_forward(self, x: np.ndarray):
        """Returns (raw_logits, decision_logits). With attention the decision
        logits are the attention-weighted ones, otherwise the raw logits."""
        logits = ex_logits_batch(x, self.heads)
        if not self.heads.use_attention:
            return logits, logits
        y_au = anfl_forward(x, self.anfl).act
        _, weighted, _ = _cross_attention_cached(y_au, logits, self.heads)
        return logits, weighted

    def predict(self, x: np.ndarray):
        """Inference on a feature batch: (au_probs, expr_idx, va_pred)."""
        x = as_matrix(x, "x")
        if x.shape[1] != self.dims.feat_dim:
            raise ShapeError(
                f"predict: features have dim {x.shape[1]}, model expects "
                f"{self.dims.feat_dim}")
        au = self.au_probs(x)
        _, decision = self.ex_forward(x)
        expr = decision.argmax(axis=1)
        va, _ = _va_head_cached(x, self.heads, "infer")
        return au, expr, va

    # -- stage losses with gradients ------------------------------------------

    def au_stage(self, x: np.ndarray, au_labels: np.ndarray,
                 want_grads: bool = True, fixed_graphs: np.ndarray | None = None):
        """Masked weighted asymmetric loss over a batch; mean reduction.

        Returns (loss, grads) with grads keyed by registry names (None when
        want_grads is False).
        """
        w = self.weights.au_weights
        if w is None:
            raise ConfigError("AU class weights not set; fit them from training data first")
        bad = ~np.isin(au_labels, (0, 1, AU_MISSING))
        if bad.any():
            b_i, n_i = np.argwhere(bad)[0]
            raise LabelError(
                f"AU labels must be 0, 1, or {AU_MISSING}; "
                f"row {b_i} column {n_i} is {au_labels[b_i, n_i]!r}")
        # rows with no AU annotation at all carry no signal and must not
        # dilute the batch mean
        keep = (au_labels != AU_MISSING).any(axis=1)
        if not keep.any():
            raise InsufficientDataError("AU stage: batch has no labeled entries")
        x = x[keep]
        au_labels = au_labels[keep]
        if fixed_graphs is not None:
            fixed_graphs = fixed_graphs[keep]
        cache = anfl_forward(x, self.anfl, graphs=fixed_graphs)
        mask = au_labels != AU_MISSING
        target = np.where(mask, au_labels, 0).astype(np.float64)
        loss, d_act = _asymmetric_terms(cache.act, target, w, mask)
        if not want_grads:
            return float(loss), None
        g = anfl_backward(d_act, cache, self.anfl)
        grads = {"anfl.au_w": g["au_w"], "anfl.au_b": g["au_b"],
                 "anfl.gcn_w": g["gcn_w"], "anfl.anchors": g["anchors"]}
        return float(loss), grads

    def ex_stage(self, x: np.ndarray, expr_labels: np.ndarray,
                 want_grads: bool = True, train_anfl: bool = False,
                 fixed_graphs: np.ndarray | None = None):
        """Weighted cross-entropy on the decision logits; mean reduction."""
        p = self.weights.ex_weights
        if p is None:
            raise ConfigError("expression class weights not set; fit them from training data first")
        keep = expr_labels != EXPR_MISSING
        if not keep.any():
            raise InsufficientDataError("EX stage: batch has no labeled samples")
        x = x[keep]
        expr_labels = expr_labels[keep]
        if fixed_graphs is not None:
            fixed_graphs = fixed_graphs[keep]
        c = self.dims.n_classes
        if expr_labels.min() < 0 or expr_labels.max() >= c:
            bad = expr_labels[(expr_labels < 0) | (expr_labels >= c)][0]
            raise LabelError(f"expression label {bad!r} outside [0, {c})")
        logits = ex_logits_batch(x, self.heads)
        anfl_cache = None
        attn_cache = None
        if self.heads.use_attention:
            anfl_cache = anfl_forward(x, self.anfl, graphs=fixed_graphs)
            _, decision, attn_cache = _cross_attention_cached(
                anfl_cache.act, logits, self.heads)
        else:
            decision = logits
        loss, d_decision = _cross_entropy_batch(decision, expr_labels, p)
        if not want_grads:
            return float(loss), None
        grads = {}
        if self.heads.use_attention:
            d_y_au, d_logits, attn_grads = _cross_attention_backward(
                d_decision, attn_cache, self.heads)
            grads["attn.q"] = attn_grads["attn_q"]
            grads["attn.k"] = attn_grads["attn_k"]
            grads["attn.v"] = attn_grads["attn_v"]
            if train_anfl:
                g = anfl_backward(d_y_au, anfl_cache, self.anfl)
                grads.update({"anfl.au_w": g["au_w"], "anfl.au_b": g["au_b"],
                              "anfl.gcn_w": g["gcn_w"], "anfl.anchors": g["anchors"]})
        else:
            d_logits = d_decision
        _, d_ex_w, d_ex_b = affine_backward(d_logits, x, self.heads.ex_w)
        grads["ex.w"] = d_ex_w
        grads["ex.b"] = d_ex_b
        return float(loss), grads

    def va_stage(self, x: np.ndarray, va_targets: np.ndarray,
                 want_grads: bool = True, update_running: bool = True):
        """Concordance loss through the train-mode head.

        Running statistics are folded in exactly once per call unless
        suppressed (the perturbed half of a sharpness-aware step must not
        touch them).
        """
        # drop sentinel rows before the forward: batchnorm statistics must
        # come from annotated samples only
        keep = va_targets[:, 0] != VA_MISSING
        if keep.sum() < 2:
            raise InsufficientDataError(
                "VA stage: concordance needs at least 2 labeled samples")
        x = x[keep]
        va_targets = va_targets[keep]
        out, cache = _va_head_cached(x, self.heads, "train", update_running)
        loss = va_loss(out, va_targets)
        if not want_grads:
            return float(loss), None
        d_out = va_loss_grad(out, va_targets)
        _, head_grads = _va_head_backward(d_out, cache, self.heads)
        grads = {"va.w": head_grads["va_w"], "va.b": head_grads["va_b"]}
        if self.heads.va_bn is not None:
            grads["va.gamma"] = head_grads["va_gamma"]
            grads["va.beta"] = head_grads["va_beta"]
        return float(loss), grads


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path, config_echo: dict | None = None) -> None:
    """Serialize everything needed to resume or evaluate, deterministically."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "dims": model.dims.to_dict(),
        "seed": model.seed,
        "stages_completed": list(model.stages_completed),
        "params": {k: v.tolist() for k, v in model.named_arrays().items()},
        "bn": None,
        "class_weights": {
            k: (getattr(model.weights, k).tolist()
                if getattr(model.weights, k) is not None else None)
            for k in ("au_weights", "ex_weights", "au_rates", "ex_rates")
        },
        "config": config_echo,
    }
    if model.heads.va_bn is not None:
        bn = model.heads.va_bn
        doc["bn"] = {
            "running_mean": bn.running_mean.tolist(),
            "running_var": bn.running_var.tolist(),
            "momentum": bn.momentum,
            "eps": bn.eps,
        }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> Model:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    try:
        dims = ModelDims(**doc["dims"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed dims block: {exc}") from exc

    model = Model.init(dims, seed=int(doc.get("seed", 0)))
    expected = model.named_arrays()
    params = doc.get("params", {})
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointError(
            f"{path}: parameter set mismatch (missing {missing}, unexpected {extra})")
    for name, ref in expected.items():
        arr = np.asarray(params[name], dtype=np.float64)
        if arr.shape != ref.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arr.shape}, expected {ref.shape}")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{path}: {name} contains non-finite values")
        model.set_array(name, arr)

    if dims.va_use_bn:
        bn_doc = doc.get("bn")
        if not isinstance(bn_doc, dict):
            raise CheckpointError(f"{path}: missing batchnorm state")
        try:
            model.heads.va_bn = BatchNormState(
                gamma=model.heads.va_bn.gamma,
                beta=model.heads.va_bn.beta,
                running_mean=np.asarray(bn_doc["running_mean"], dtype=np.float64),
                running_var=np.asarray(bn_doc["running_var"], dtype=np.float64),
                momentum=float(bn_doc["momentum"]),
                eps=float(bn_doc["eps"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: malformed batchnorm state: {exc}") from exc

    cw = doc.get("class_weights", {})
    model.weights = ClassWeights(
        au_weights=cw.get("au_weights"), ex_weights=cw.get("ex_weights"),
        au_rates=cw.get("au_rates"), ex_rates=cw.get("ex_rates"))
    stages = doc.get("stages_completed", [])
    if not isinstance(stages, list) or any(s not in ("au", "ex", "va") for s in stages):
        raise CheckpointError(f"{path}: malformed stages_completed {stages!r}")
    model.stages_completed = list(stages)
    return model
