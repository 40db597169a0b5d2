"""Finite-difference validation of every hand-derived backward pass.

Each check builds a small randomly-parameterized instance, computes the
analytic gradient of a scalar probe (a fixed random linear functional of
the output, or the loss itself), and compares against the central-difference
oracle. Graph topology is held fixed while parameters move, matching its
constant treatment during backpropagation.
"""

from __future__ import annotations

import zlib

import numpy as np

from .graph import AnflParams, anfl_backward, anfl_forward
from .heads import (
    HeadParams,
    _cross_attention_backward,
    _cross_attention_cached,
    _va_head_backward,
    _va_head_cached,
)
from .linalg import (
    BatchNormState,
    _batchnorm_forward_cached,
    affine_backward,
    affine_forward,
    batchnorm_backward,
    cosine_similarity_relu,
    cosine_similarity_relu_grad,
    finite_diff_grad,
    softmax,
    softmax_backward_rows,
)
from .losses import (
    _asymmetric_terms,
    _cross_entropy_batch,
    au_weights_from_rates,
    va_loss,
    va_loss_grad,
    weighted_asymmetric_loss,
    weighted_cross_entropy,
)
from .model import Model, ModelDims

DEFAULT_TOL = 1e-4
DEFAULT_H = 1e-5
DEFAULT_POINTS = 10


def pack(arrays: dict):
    """Flatten a name -> array dict into (theta, spec) for the oracle."""
    spec = [(name, a.shape) for name, a in arrays.items()]
    parts = [np.asarray(a, dtype=np.float64).ravel() for a in arrays.values()]
    theta = np.concatenate(parts) if parts else np.zeros(0)
    return theta, spec

def unpack(theta: np.ndarray, spec):
    out = {}
    i = 0
    for name, shape in spec:
        size = int(np.prod(shape))
        out[name] = theta[i:i + size].reshape(shape).copy()
        i += size
    return out


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


# ---------------------------------------------------------------------------
# individual checks; each returns the error at one random point


def _check_affine(rng, h):
    b, d_in, d_out = 3, 4, 2
    x = rng.standard_normal((b, d_in))
    w = rng.standard_normal((d_out, d_in))
    bias = rng.standard_normal(d_out)
    c = rng.standard_normal((b, d_out))
    theta0, spec = pack({"x": x, "w": w, "b": bias})

    def f(theta):
        a = unpack(theta, spec)
        return float((c * affine_forward(a["x"], a["w"], a["b"])).sum())

    dx, dw, db = affine_backward(c, x, w)
    analytic, _ = pack({"x": dx, "w": dw, "b": db})
    return rel_err(analytic, finite_diff_grad(f, theta0, h))


def _check_batchnorm(rng, h):
    b, width = 5, 3
    x = rng.standard_normal((b, width))
    gamma = rng.uniform(0.5, 1.5, width)
    beta = rng.standard_normal(width)
    c = rng.standard_normal((b, width))
    theta0, spec = pack({"x": x, "gamma": gamma, "beta": beta})

    def f(theta):
        a = unpack(theta, spec)
        state = BatchNormState(a["gamma"], a["beta"], np.zeros(width), np.ones(width))
        out, _ = _batchnorm_forward_cached(a["x"], state, "train", update_running=False)
        return float((c * out).sum())

    state = BatchNormState(gamma, beta, np.zeros(width), np.ones(width))
    _, cache = _batchnorm_forward_cached(x, state, "train", update_running=False)
    dx, dgamma, dbeta = batchnorm_backward(c, cache)
    analytic, _ = pack({"x": dx, "gamma": dgamma, "beta": dbeta})
    return rel_err(analytic, finite_diff_grad(f, theta0, h))


def _check_softmax(rng, h):
    n = 6
    v = rng.standard_normal(n)
    c = rng.standard_normal(n)

    def f(theta):
        return float(c @ softmax(theta))

    a = softmax(v)
    analytic = softmax_backward_rows(c[None, :], a[None, :])[0]
    return rel_err(analytic, finite_diff_grad(f, v, h))


def _check_cosine_relu(rng, h):
    d = 7
    # keep entries away from the relu kink so the probe stays smooth
    u = rng.uniform(0.1, 1.5, d) * rng.choice([-1.0, 1.0], size=d)
    v = rng.uniform(0.1, 1.5, d) * rng.choice([-1.0, 1.0], size=d)
    theta0, spec = pack({"u": u, "v": v})

    def f(theta):
        a = unpack(theta, spec)
        return cosine_similarity_relu(a["u"], a["v"])

    du, dv = cosine_similarity_relu_grad(u, v)
    analytic, _ = pack({"u": du, "v": dv})
    return rel_err(analytic, finite_diff_grad(f, theta0, h))


def _anfl_test_params(rng, n=5, d=4, feat=6, k=2):
    return AnflParams(
        au_w=rng.standard_normal((n, d, feat)) / np.sqrt(feat),
        au_b=rng.standard_normal((n, d)) * 0.1,
        gcn_w=rng.standard_normal((d, d)) / np.sqrt(d),
        anchors=rng.uniform(0.1, 1.0, (n, d)),
        k=k,
    )


def _check_anfl_pipeline(rng, h):
    b, n, d, feat = 3, 5, 4, 6
    params = _anfl_test_params(rng, n, d, feat)
    x = rng.standard_normal((b, feat))
    c = rng.standard_normal((b, n))
    cache0 = anfl_forward(x, params)
    norm0 = cache0.norm  # topology held fixed below
    theta0, spec = pack({"au_w": params.au_w, "au_b": params.au_b,
                         "gcn_w": params.gcn_w, "anchors": params.anchors, "x": x})

    def f(theta):
        a = unpack(theta, spec)
        p = AnflParams(a["au_w"], a["au_b"], a["gcn_w"], a["anchors"], k=params.k)
        return float((c * anfl_forward(a["x"], p, graphs=norm0).act).sum())

    g = anfl_backward(c, cache0, params)
    analytic, _ = pack({"au_w": g["au_w"], "au_b": g["au_b"],
                        "gcn_w": g["gcn_w"], "anchors": g["anchors"], "x": g["x"]})
    return rel_err(analytic, finite_diff_grad(f, theta0, h))


def _va_test_heads(va_w, va_b, use_bn, gamma=None, beta=None):
    bn = None
    if use_bn:
        bn = BatchNormState(gamma, beta, np.zeros(2), np.ones(2))
    return HeadParams(va_w=va_w, va_b=va_b, va_bn=bn,
                      ex_w=np.zeros((1, va_w.shape[1])), ex_b=np.zeros(1),
                      attn_q=None, attn_k=None, attn_v=None)


def _check_va_head(rng, h):
    b, feat = 4, 5
    x = rng.standard_normal((b, feat))
    va_w = rng.standard_normal((2, feat)) * 0.5
    va_b = rng.standard_normal(2) * 0.1
    gamma = rng.uniform(0.5, 1.5, 2)
    beta = rng.standard_normal(2) * 0.1
    c = rng.standard_normal((b, 2))
    worst = 0.0
    for use_bn in (True, False):
        arrays = {"va_w": va_w, "va_b": va_b, "x": x}
        if use_bn:
            arrays.update({"gamma": gamma, "beta": beta})
        theta0, spec = pack(arrays)

        def f(theta):
            a = unpack(theta, spec)
            hp = _va_test_heads(a["va_w"], a["va_b"], use_bn,
                                a.get("gamma"), a.get("beta"))
            out, _ = _va_head_cached(a["x"], hp, "train", update_running=False)
            return float((c * out).sum())

        hp = _va_test_heads(va_w, va_b, use_bn, gamma, beta)
        _, cache = _va_head_cached(x, hp, "train", update_running=False)
        dx, grads = _va_head_backward(c, cache, hp)
        analytic_arrays = {"va_w": grads["va_w"], "va_b": grads["va_b"], "x": dx}
        if use_bn:
            analytic_arrays.update({"gamma": grads["va_gamma"], "beta": grads["va_beta"]})
        analytic, _ = pack(analytic_arrays)
        worst = max(worst, rel_err(analytic, finite_diff_grad(f, theta0, h)))
    return worst


def _attn_test_heads(feat, ex_w, ex_b, q, k, v):
    return HeadParams(va_w=np.zeros((2, feat)), va_b=np.zeros(2), va_bn=None,
                      ex_w=ex_w, ex_b=ex_b, attn_q=q, attn_k=k, attn_v=v)


def _check_ex_attention(rng, h):
    b, feat, n, n_cls, d_att = 3, 5, 4, 6, 3
    x = rng.standard_normal((b, feat))
    y_au = rng.uniform(0.0, 1.0, (b, n))
    ex_w = rng.standard_normal((n_cls, feat)) * 0.5
    ex_b = rng.standard_normal(n_cls) * 0.1
    q = rng.standard_normal((d_att, n))
    k = rng.standard_normal((d_att, n_cls))
    v = rng.standard_normal((n_cls, d_att))
    c = rng.standard_normal((b, n_cls))
    theta0, spec = pack({"ex_w": ex_w, "ex_b": ex_b, "q": q, "k": k, "v": v,
                         "x": x, "y_au": y_au})

    def f(theta):
        a = unpack(theta, spec)
        hp = _attn_test_heads(feat, a["ex_w"], a["ex_b"], a["q"], a["k"], a["v"])
        logits = affine_forward(a["x"], a["ex_w"], a["ex_b"])
        _, weighted, _ = _cross_attention_cached(a["y_au"], logits, hp)
        return float((c * weighted).sum())

    hp = _attn_test_heads(feat, ex_w, ex_b, q, k, v)
    logits = affine_forward(x, ex_w, ex_b)
    _, _, cache = _cross_attention_cached(y_au, logits, hp)
    d_y_au, d_logits, attn_grads = _cross_attention_backward(c, cache, hp)
    dx, d_ex_w, d_ex_b = affine_backward(d_logits, x, ex_w)
    analytic, _ = pack({"ex_w": d_ex_w, "ex_b": d_ex_b,
                        "q": attn_grads["attn_q"], "k": attn_grads["attn_k"],
                        "v": attn_grads["attn_v"], "x": dx, "y_au": d_y_au})
    return rel_err(analytic, finite_diff_grad(f, theta0, h))


def _check_loss_au(rng, h):
    n = 6
    pred = rng.uniform(0.05, 0.95, n)
    target = rng.integers(0, 2, n).astype(np.float64)
    w = au_weights_from_rates(rng.uniform(0.2, 0.8, n))

    def f(theta):
        return weighted_asymmetric_loss(theta, target, w)

    mask = np.ones((1, n), dtype=bool)
    _, d = _asymmetric_terms(pred[None, :], target[None, :], w, mask)
    return rel_err(d[0], finite_diff_grad(f, pred, h))


def _check_loss_ex(rng, h):
    n_cls = 7
    logits = rng.standard_normal(n_cls)
    target = int(rng.integers(0, n_cls))
    p = au_weights_from_rates(rng.uniform(0.05, 0.3, n_cls))

    def f(theta):
        return weighted_cross_entropy(theta, target, p)

    _, d = _cross_entropy_batch(logits[None, :], np.array([target]), p)
    return rel_err(d[0], finite_diff_grad(f, logits, h))


def _check_loss_va(rng, h):
    b = 6
    pred = rng.uniform(-0.9, 0.9, (b, 2))
    target = rng.uniform(-0.9, 0.9, (b, 2))
    theta0, spec = pack({"pred": pred})

    def f(theta):
        return va_loss(unpack(theta, spec)["pred"], target)

    analytic, _ = pack({"pred": va_loss_grad(pred, target)})
    return rel_err(analytic, finite_diff_grad(f, theta0, h))


# ---------------------------------------------------------------------------
# full-stage checks: loss + backward over every unfrozen parameter


def _stage_model(rng):
    dims = ModelDims(feat_dim=6, node_dim=4, d_att=3, n_nodes=5, n_classes=4, k=2)
    model = Model.init(dims, seed=int(rng.integers(0, 2 ** 31)))
    model.anfl.anchors = rng.uniform(0.1, 1.0, model.anfl.anchors.shape)
    model.weights.au_weights = au_weights_from_rates(rng.uniform(0.2, 0.8, dims.n_nodes))
    model.weights.ex_weights = au_weights_from_rates(rng.uniform(0.1, 0.4, dims.n_classes))
    return dims, model


def _stage_check(model, names, loss_fn, grads, h):
    params = model.named_arrays()
    theta0, spec = pack({n: params[n] for n in names})

    def f(theta):
        vals = unpack(theta, spec)
        for n in names:
            params[n][...] = vals[n]
        return loss_fn()

    analytic, _ = pack({n: grads[n] for n in names})
    err = rel_err(analytic, finite_diff_grad(f, theta0, h))
    vals0 = unpack(theta0, spec)
    for n in names:
        params[n][...] = vals0[n]
    return err


def _check_stage_au(rng, h):
    b = 5
    dims, model = _stage_model(rng)
    x = rng.standard_normal((b, dims.feat_dim))
    labels = rng.integers(0, 2, (b, dims.n_nodes))
    labels[rng.random((b, dims.n_nodes)) < 0.2] = -1
    norm0 = anfl_forward(x, model.anfl).norm
    _, grads = model.au_stage(x, labels, fixed_graphs=norm0)
    names = sorted(grads)
    return _stage_check(model, names,
                        lambda: model.au_stage(x, labels, want_grads=False,
                                               fixed_graphs=norm0)[0],
                        grads, h)


def _check_stage_ex(rng, h):
    b = 5
    dims, model = _stage_model(rng)
    x = rng.standard_normal((b, dims.feat_dim))
    labels = rng.integers(0, dims.n_classes, b)
    norm0 = anfl_forward(x, model.anfl).norm
    _, grads = model.ex_stage(x, labels, train_anfl=True, fixed_graphs=norm0)
    names = sorted(grads)
    return _stage_check(model, names,
                        lambda: model.ex_stage(x, labels, want_grads=False,
                                               train_anfl=True,
                                               fixed_graphs=norm0)[0],
                        grads, h)


def _check_stage_va(rng, h):
    b = 6
    dims, model = _stage_model(rng)
    x = rng.standard_normal((b, dims.feat_dim))
    targets = rng.uniform(-0.9, 0.9, (b, 2))
    _, grads = model.va_stage(x, targets, update_running=False)
    names = sorted(grads)
    return _stage_check(model, names,
                        lambda: model.va_stage(x, targets, want_grads=False,
                                               update_running=False)[0],
                        grads, h)


CHECKS = (
    ("core.affine", _check_affine),
    ("core.batchnorm", _check_batchnorm),
    ("core.softmax", _check_softmax),
    ("core.cosine_relu", _check_cosine_relu),
    ("anfl.pipeline", _check_anfl_pipeline),
    ("heads.va", _check_va_head),
    ("heads.ex_attention", _check_ex_attention),
    ("loss.au_asymmetric", _check_loss_au),
    ("loss.ex_cross_entropy", _check_loss_ex),
    ("loss.va_ccc", _check_loss_va),
    ("stage.au", _check_stage_au),
    ("stage.ex", _check_stage_ex),
    ("stage.va", _check_stage_va),
)


def run_suite(seed: int = 0, h: float = DEFAULT_H, points: int = DEFAULT_POINTS) -> dict:
    """Worst relative error per module over `points` seeded random points."""
    results = {}
    for name, check in CHECKS:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        results[name] = max(check(rng, h) for _ in range(points))
    return results
