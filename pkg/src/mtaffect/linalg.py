"""Dense float64 primitives shared by every head.

Affine maps, elementwise activations, batch normalization, numerically safe
softmax, rectified cosine similarity, and the central-difference gradient
oracle used to validate every hand-derived backward pass. All public
functions validate shapes and finiteness at the boundary and compute in
64-bit floats throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InsufficientDataError, NumericalError, ShapeError

BN_EPS_DEFAULT = 1e-5
BN_MOMENTUM_DEFAULT = 0.9
COSINE_EPS_DEFAULT = 1e-8
# probabilities are clipped to [PROB_CLAMP, 1 - PROB_CLAMP] before any log
PROB_CLAMP = 1e-7


def as_array(a, name: str = "array") -> np.ndarray:
    """Coerce to float64 ndarray and require every entry finite."""
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite entries")
    return arr


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = as_array(a, name)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def as_vector(a, name: str = "vector") -> np.ndarray:
    arr = as_array(a, name)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# affine


def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise affine map: out[i] = w @ x[i] + b.

    x: [B, D], w: [O, D], b: [O] -> [B, O]
    """
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    b = as_vector(b, "b")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"affine: x shape {x.shape} does not match w shape {w.shape}")
    if b.shape[0] != w.shape[0]:
        raise ShapeError(f"affine: b shape {b.shape} does not match w shape {w.shape}")
    return x @ w.T + b


def affine_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Gradients of affine_forward. Returns (dx, dw, db)."""
    dx = dout @ w
    dw = dout.T @ x
    db = dout.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# elementwise activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly 0
    return (x > 0.0).astype(np.float64)


def tanh_grad_from_output(y: np.ndarray) -> np.ndarray:
    """d tanh(x)/dx expressed through y = tanh(x)."""
    return 1.0 - y * y


# ---------------------------------------------------------------------------
# softmax


def softmax(v: np.ndarray) -> np.ndarray:
    """Numerically safe softmax of a vector (max subtraction before exp)."""
    v = as_vector(v, "softmax input")
    if v.shape[0] == 0:
        raise ShapeError("softmax input must be non-empty")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Softmax applied independently to each row of a matrix."""
    m = as_matrix(m, "softmax input")
    if m.shape[1] == 0:
        raise ShapeError("softmax rows must be non-empty")
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward_rows(dout: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Backward of row-wise softmax given its output a. Returns d(input)."""
    # da/dh = diag(a) - a a^T, so dh = a * (dout - <dout, a>)
    inner = (dout * a).sum(axis=1, keepdims=True)
    return a * (dout - inner)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Per-feature scale/shift plus running statistics for inference.

    Running statistics follow the retain convention:
    running <- momentum * running + (1 - momentum) * batch_stat.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM_DEFAULT
    eps: float = BN_EPS_DEFAULT

    def __post_init__(self):
        self.gamma = as_vector(self.gamma, "gamma")
        self.beta = as_vector(self.beta, "beta")
        self.running_mean = as_vector(self.running_mean, "running_mean")
        self.running_var = as_vector(self.running_var, "running_var")
        n = self.gamma.shape[0]
        for name, v in (("beta", self.beta), ("running_mean", self.running_mean),
                        ("running_var", self.running_var)):
            if v.shape[0] != n:
                raise ShapeError(
                    f"batchnorm: {name} has length {v.shape[0]}, expected {n}")
        if np.any(self.running_var < 0.0):
            raise ConfigError("batchnorm: running_var must be nonnegative")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"batchnorm: momentum must lie in (0, 1), got {self.momentum}")
        if self.eps <= 0.0:
            raise ConfigError(f"batchnorm: eps must be positive, got {self.eps}")

    @classmethod
    def identity(cls, width: int, momentum: float = BN_MOMENTUM_DEFAULT,
                 eps: float = BN_EPS_DEFAULT) -> "BatchNormState":
        return cls(np.ones(width), np.zeros(width), np.zeros(width),
                   np.ones(width), momentum, eps)

    @property
    def width(self) -> int:
        return self.gamma.shape[0]


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str,
                      update_running: bool = True) -> np.ndarray:
    """Batch normalization over rows of x: gamma * normalized + beta.

    Train mode normalizes by the batch's population moments (divide by B)
    and, unless suppressed, folds them into the running statistics. Infer
    mode normalizes by the stored running statistics and never mutates state.
    """
    out, _ = _batchnorm_forward_cached(x, state, mode, update_running)
    return out


def _batchnorm_forward_cached(x: np.ndarray, state: BatchNormState, mode: str,
                              update_running: bool = True):
    x = as_matrix(x, "batchnorm input")
    if x.shape[1] != state.width:
        raise ShapeError(
            f"batchnorm: input shape {x.shape} does not match state width {state.width}")
    if mode not in ("train", "infer"):
        raise ConfigError(f"batchnorm: mode must be 'train' or 'infer', got {mode!r}")

    if mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        x_hat = (x - state.running_mean) * inv_std
        return state.gamma * x_hat + state.beta, None

    if x.shape[0] < 2:
        raise InsufficientDataError(
            f"batchnorm: degenerate batch of {x.shape[0]} row(s) in train mode")
    mean = x.mean(axis=0)
    var = x.var(axis=0)  # population variance, divide by B
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x - mean) * inv_std
    out = state.gamma * x_hat + state.beta
    if update_running:
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mean
        state.running_var = m * state.running_var + (1.0 - m) * var
    cache = (x_hat, inv_std, state.gamma)
    return out, cache


def batchnorm_backward(dout: np.ndarray, cache):
    """Backward of train-mode batchnorm. Returns (dx, dgamma, dbeta).

    Differentiates through the batch statistics:
    dx = (1/B) inv_std * (B*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat)).
    """
    x_hat, inv_std, gamma = cache
    b = x_hat.shape[0]
    dgamma = (dout * x_hat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dx_hat = dout * gamma
    dx = (inv_std / b) * (b * dx_hat - dx_hat.sum(axis=0)
                          - x_hat * (dx_hat * x_hat).sum(axis=0))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# rectified cosine similarity


def cosine_similarity_relu(u: np.ndarray, v: np.ndarray,
                           eps: float = COSINE_EPS_DEFAULT) -> float:
    """Cosine similarity of the rectified vectors, bounded to [0, 1).

    relu(u) . relu(v) / (|relu(u)| * |relu(v)| + eps). The eps in the
    denominator makes the all-nonpositive case well defined (result 0).
    """
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if u.shape != v.shape:
        raise ShapeError(f"cosine: u shape {u.shape} does not match v shape {v.shape}")
    if eps <= 0.0:
        raise ConfigError(f"cosine: eps must be positive, got {eps}")
    ur = relu(u)
    vr = relu(v)
    num = float(ur @ vr)
    den = float(np.linalg.norm(ur) * np.linalg.norm(vr)) + eps
    return num / den


def cosine_similarity_relu_grad(u: np.ndarray, v: np.ndarray,
                                eps: float = COSINE_EPS_DEFAULT):
    """Gradient of cosine_similarity_relu w.r.t. u and v. Returns (du, dv)."""
    ur = relu(u)
    vr = relu(v)
    nu = float(np.linalg.norm(ur))
    nv = float(np.linalg.norm(vr))
    if nu == 0.0 or nv == 0.0:
        # rectified mask is zero wherever the input is nonpositive, so the
        # subgradient vanishes identically on this branch
        return np.zeros_like(ur), np.zeros_like(vr)
    num = float(ur @ vr)
    den = nu * nv + eps
    d_ur = vr / den - num * (nv / nu) * ur / den ** 2
    d_vr = ur / den - num * (nu / nv) * vr / den ** 2
    return d_ur * relu_grad(u), d_vr * relu_grad(v)


def clamp_prob(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle: (f(t+h e_i) - f(t-h e_i)) / 2h.

    Used to validate every analytic backward pass in this package. f must
    return a finite scalar at every probe point; a non-finite evaluation
    raises a numerical error naming the offending coordinate.
    """
    theta = as_vector(np.array(theta, dtype=np.float64, copy=True), "theta")
    if h <= 0.0:
        raise ConfigError(f"finite_diff_grad: h must be positive, got {h}")
    grad = np.zeros_like(theta)
    for i in range(theta.shape[0]):
        orig = theta[i]
        theta[i] = orig + h
        f_plus = float(f(theta))
        theta[i] = orig - h
        f_minus = float(f(theta))
        theta[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericalError(
                f"finite_diff_grad: non-finite evaluation at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
