"""Expression and valence-arousal heads.

The VA head is affine -> batchnorm -> tanh (the batchnorm stage is optional
so the plain affine -> tanh variant can be compared against it). Expression
recognition is a linear layer whose raw logits are re-weighted by an
additive cross-attention over the AU activations; the attention runs at
both training and inference time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .linalg import (
    BatchNormState,
    _batchnorm_forward_cached,
    affine_backward,
    affine_forward,
    as_matrix,
    as_vector,
    batchnorm_backward,
    softmax_backward_rows,
    softmax_rows,
    tanh_grad_from_output,
)


@dataclass
class HeadParams:
    """Trainable tensors of both heads.

    va_bn is None for the plain affine -> tanh variant. The attention
    matrices are None when logits are used unweighted.
    """

    va_w: np.ndarray                 # [2, D]
    va_b: np.ndarray                 # [2]
    va_bn: BatchNormState | None
    ex_w: np.ndarray                 # [C, D]
    ex_b: np.ndarray                 # [C]
    attn_q: np.ndarray | None        # [d_att, N] applied to AU activations
    attn_k: np.ndarray | None        # [d_att, C] applied to raw logits
    attn_v: np.ndarray | None        # [C, d_att], no bias

    def __post_init__(self):
        self.va_w = np.asarray(self.va_w, dtype=np.float64)
        self.va_b = np.asarray(self.va_b, dtype=np.float64)
        self.ex_w = np.asarray(self.ex_w, dtype=np.float64)
        self.ex_b = np.asarray(self.ex_b, dtype=np.float64)
        if self.va_w.ndim != 2 or self.va_w.shape[0] != 2:
            raise ShapeError(f"va_w must be [2, D], got shape {self.va_w.shape}")
        if self.va_b.shape != (2,):
            raise ShapeError(f"va_b must be [2], got shape {self.va_b.shape}")
        if self.va_bn is not None and self.va_bn.width != 2:
            raise ShapeError(f"va_bn width must be 2, got {self.va_bn.width}")
        if self.ex_w.ndim != 2:
            raise ShapeError(f"ex_w must be [C, D], got shape {self.ex_w.shape}")
        if self.ex_b.shape != (self.ex_w.shape[0],):
            raise ShapeError(
                f"ex_b shape {self.ex_b.shape} does not match ex_w shape {self.ex_w.shape}")
        attn = (self.attn_q, self.attn_k, self.attn_v)
        if any(a is None for a in attn) != all(a is None for a in attn):
            raise ShapeError("attention matrices must be all present or all absent")
        if self.attn_q is not None:
            self.attn_q = np.asarray(self.attn_q, dtype=np.float64)
            self.attn_k = np.asarray(self.attn_k, dtype=np.float64)
            self.attn_v = np.asarray(self.attn_v, dtype=np.float64)
            d_att = self.attn_q.shape[0]
            c = self.ex_w.shape[0]
            if self.attn_k.shape != (d_att, c):
                raise ShapeError(
                    f"attn_k shape {self.attn_k.shape} must be ({d_att}, {c})")
            if self.attn_v.shape != (c, d_att):
                raise ShapeError(
                    f"attn_v shape {self.attn_v.shape} must be ({c}, {d_att})")

    @property
    def n_classes(self) -> int:
        return self.ex_w.shape[0]

    @property
    def use_attention(self) -> bool:
        return self.attn_q is not None

    @classmethod
    def init(cls, rng: np.random.Generator, feat_dim: int, n_nodes: int = 12,
             n_classes: int = 8, d_att: int = 32, use_attention: bool = True,
             use_bn: bool = True) -> "HeadParams":
        scale = 1.0 / np.sqrt(feat_dim)
        if use_attention:
            attn_q = rng.standard_normal((d_att, n_nodes)) / np.sqrt(n_nodes)
            attn_k = rng.standard_normal((d_att, n_classes)) / np.sqrt(n_classes)
            # start the value map at zero: scores h are then zero, the softmax
            # is uniform, and reweighting is a no-op until training earns a
            # preference. A random start can pin one class's weight low before
            # its logit has grown, and argmax(a * logits) never recovers it.
            attn_v = np.zeros((n_classes, d_att))
        else:
            attn_q = attn_k = attn_v = None
        return cls(
            va_w=rng.standard_normal((2, feat_dim)) * scale,
            va_b=np.zeros(2),
            va_bn=BatchNormState.identity(2) if use_bn else None,
            ex_w=rng.standard_normal((n_classes, feat_dim)) * scale,
            ex_b=np.zeros(n_classes),
            attn_q=attn_q,
            attn_k=attn_k,
            attn_v=attn_v,
        )


# ---------------------------------------------------------------------------
# valence-arousal head


def va_head(x: np.ndarray, params: HeadParams, mode: str = "infer",
            update_running: bool = True) -> np.ndarray:
    """tanh(batchnorm(affine(x))): [B, D] -> [B, 2] in (-1, 1)."""
    out, _ = _va_head_cached(x, params, mode, update_running)
    return out


def _va_head_cached(x: np.ndarray, params: HeadParams, mode: str,
                    update_running: bool = True):
    x = as_matrix(x, "x")
    a = affine_forward(x, params.va_w, params.va_b)
    if params.va_bn is not None:
        pre, bn_cache = _batchnorm_forward_cached(a, params.va_bn, mode, update_running)
    else:
        pre, bn_cache = a, None
    out = np.tanh(pre)
    return out, (x, bn_cache, out)


def _va_head_backward(dout: np.ndarray, cache, params: HeadParams):
    """Backward of the train-mode VA head.

    Returns (dx, grads) where grads holds va_w, va_b and, when batchnorm is
    present, va_gamma and va_beta.
    """
    x, bn_cache, out = cache
    d_pre = dout * tanh_grad_from_output(out)
    grads = {}
    if params.va_bn is not None:
        d_aff, d_gamma, d_beta = batchnorm_backward(d_pre, bn_cache)
        grads["va_gamma"] = d_gamma
        grads["va_beta"] = d_beta
    else:
        d_aff = d_pre
    dx, d_w, d_b = affine_backward(d_aff, x, params.va_w)
    grads["va_w"] = d_w
    grads["va_b"] = d_b
    return dx, grads


# ---------------------------------------------------------------------------
# expression head


def ex_logits(x: np.ndarray, params: HeadParams) -> np.ndarray:
    """Raw expression logits of one feature vector: ex_w @ x + ex_b."""
    x = as_vector(x, "x")
    if x.shape[0] != params.ex_w.shape[1]:
        raise ShapeError(
            f"ex_logits: x has length {x.shape[0]}, expected {params.ex_w.shape[1]}")
    return params.ex_w @ x + params.ex_b


def ex_logits_batch(x: np.ndarray, params: HeadParams) -> np.ndarray:
    return affine_forward(x, params.ex_w, params.ex_b)


def cross_attention(y_au: np.ndarray, ex_raw: np.ndarray, params: HeadParams):
    """Additive attention re-weighting of raw logits for one sample.

    h = attn_v @ tanh(attn_q @ y_au + attn_k @ ex_raw), a = softmax(h),
    weighted = a * ex_raw. Returns (a, weighted).
    """
    y_au = as_vector(y_au, "y_au")
    ex_raw = as_vector(ex_raw, "ex_raw")
    a, weighted, _ = _cross_attention_cached(y_au[None, :], ex_raw[None, :], params)
    return a[0], weighted[0]


def _cross_attention_cached(y_au: np.ndarray, ex_raw: np.ndarray, params: HeadParams):
    if params.attn_q is None:
        raise ShapeError("cross_attention: attention matrices are absent")
    if y_au.shape[1] != params.attn_q.shape[1]:
        raise ShapeError(
            f"cross_attention: y_au has width {y_au.shape[1]}, "
            f"expected {params.attn_q.shape[1]}")
    if ex_raw.shape[1] != params.n_classes:
        raise ShapeError(
            f"cross_attention: ex_raw has width {ex_raw.shape[1]}, "
            f"expected {params.n_classes}")
    z = y_au @ params.attn_q.T + ex_raw @ params.attn_k.T   # [B, d_att]
    t = np.tanh(z)
    h = t @ params.attn_v.T                                 # [B, C]
    a = softmax_rows(h)
    weighted = a * ex_raw
    return a, weighted, (y_au, ex_raw, t, a)


def _cross_attention_backward(d_weighted: np.ndarray, cache, params: HeadParams):
    """Backward of the attention re-weighting.

    Returns (d_y_au, d_ex_raw, grads) with grads holding attn_q, attn_k,
    attn_v. d_ex_raw includes both the direct elementwise path and the path
    through the attention scores.
    """
    y_au, ex_raw, t, a = cache
    d_a = d_weighted * ex_raw
    d_ex_raw = d_weighted * a
    d_h = softmax_backward_rows(d_a, a)
    d_attn_v = d_h.T @ t
    d_t = d_h @ params.attn_v
    d_z = d_t * tanh_grad_from_output(t)
    d_attn_q = d_z.T @ y_au
    d_attn_k = d_z.T @ ex_raw
    d_y_au = d_z @ params.attn_q
    d_ex_raw = d_ex_raw + d_z @ params.attn_k
    grads = {"attn_q": d_attn_q, "attn_k": d_attn_k, "attn_v": d_attn_v}
    return d_y_au, d_ex_raw, grads
