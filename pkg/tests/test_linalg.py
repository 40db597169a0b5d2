"""Core dense-math primitives: forwards against hand-computed values,
backwards against central finite differences."""

import numpy as np
import pytest

from mtaffect.errors import ConfigError, InsufficientDataError, NumericalError, ShapeError
from mtaffect.linalg import (
    BatchNormState,
    affine_backward,
    affine_forward,
    batchnorm_backward,
    batchnorm_forward,
    clamp_prob,
    cosine_similarity_relu,
    finite_diff_grad,
    relu,
    softmax,
    softmax_rows,
    tanh_grad_from_output,
    _batchnorm_forward_cached,
)


# ---------------------------------------------------------------------------
# affine


def test_affine_identity():
    out = affine_forward(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2))
    assert np.array_equal(out, [[1.0, 2.0]])


def test_affine_hand_value():
    out = affine_forward(np.array([[1.0, 1.0]]), np.array([[2.0, 3.0]]), np.array([1.0]))
    assert out.shape == (1, 1)
    assert out[0, 0] == 6.0


def test_affine_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        affine_forward(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(4))
    msg = str(exc.value)
    assert "(2, 3)" in msg and "(4, 2)" in msg


def test_affine_rejects_nonfinite():
    with pytest.raises(NumericalError):
        affine_forward(np.array([[np.nan, 1.0]]), np.eye(2), np.zeros(2))


def test_affine_backward_matches_finite_diff():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(2, 3))
    b = rng.normal(size=2)
    c = rng.normal(size=(4, 2))  # fixed probe functional

    def f(theta):
        wt = theta[:6].reshape(2, 3)
        bt = theta[6:8]
        xt = theta[8:].reshape(4, 3)
        return float((affine_forward(xt, wt, bt) * c).sum())

    theta0 = np.concatenate([w.ravel(), b, x.ravel()])
    num = finite_diff_grad(f, theta0, 1e-5)
    dx, dw, db = affine_backward(c, x, w)
    ana = np.concatenate([dw.ravel(), db, dx.ravel()])
    assert np.linalg.norm(ana - num) / (np.linalg.norm(ana) + np.linalg.norm(num)) < 1e-9


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform():
    out = softmax(np.zeros(8))
    assert np.allclose(out, 1.0 / 8, atol=1e-15)


def test_softmax_shift_invariant_ln2():
    # [c, c+ln2] -> (1/3, 2/3) for any finite c
    for c in (-40.0, 0.0, 5.0, 1e3):
        out = softmax(np.array([c, c + np.log(2.0)]))
        assert abs(out[0] - 1.0 / 3.0) < 1e-12
        assert abs(out[1] - 2.0 / 3.0) < 1e-12


def test_softmax_no_overflow():
    out = softmax(np.array([1000.0, 0.0]))
    assert np.isfinite(out).all()
    assert out[0] > 1.0 - 1e-12
    assert out.argmax() == 0


def test_softmax_sum_and_nonneg_property():
    rng = np.random.default_rng(5)
    for _ in range(50):
        v = rng.normal(scale=10, size=rng.integers(1, 20))
        out = softmax(v)
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) < 1e-12
        shifted = softmax(v + rng.normal())
        assert np.abs(out - shifted).max() < 1e-12
        assert out.argmax() == v.argmax()


def test_softmax_empty_is_shape_error():
    with pytest.raises(ShapeError):
        softmax(np.zeros(0))


# ---------------------------------------------------------------------------
# batchnorm


def test_batchnorm_hand_value():
    # x=[[0],[2]]: batch mean 1, population std 1. eps=1e-30 folds away
    # exactly in float64 (1 + 1e-30 == 1).
    state = BatchNormState(gamma=np.ones(1), beta=np.zeros(1),
                           running_mean=np.zeros(1), running_var=np.ones(1),
                           momentum=0.9, eps=1e-30)
    out = batchnorm_forward(np.array([[0.0], [2.0]]), state, "train")
    assert np.array_equal(out, [[-1.0], [1.0]])


def test_batchnorm_already_normalized_passthrough():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 3))
    x = (x - x.mean(axis=0)) / np.sqrt(x.var(axis=0))
    # eps tiny enough to fold away against unit variance
    state = BatchNormState(gamma=np.ones(3), beta=np.zeros(3),
                           running_mean=np.zeros(3), running_var=np.ones(3),
                           momentum=0.9, eps=1e-30)
    out = batchnorm_forward(x, state, "train")
    assert np.abs(out - x).max() < 1e-9


def test_batchnorm_gamma_zero_gives_beta():
    state = BatchNormState(gamma=np.zeros(2), beta=np.array([3.0, -1.0]),
                           running_mean=np.zeros(2), running_var=np.ones(2),
                           momentum=0.9, eps=1e-5)
    out = batchnorm_forward(np.random.default_rng(1).normal(size=(5, 2)), state, "train")
    assert np.allclose(out, [3.0, -1.0])


def test_batchnorm_train_moments_property():
    # per column: mean beta, population variance gamma^2 (eps small)
    rng = np.random.default_rng(7)
    gamma = np.array([2.0, 0.5])
    beta = np.array([-1.0, 4.0])
    state = BatchNormState(gamma=gamma.copy(), beta=beta.copy(),
                           running_mean=np.zeros(2), running_var=np.ones(2),
                           momentum=0.9, eps=1e-12)
    out = batchnorm_forward(rng.normal(scale=5, size=(200, 2)), state, "train")
    assert np.abs(out.mean(axis=0) - beta).max() < 1e-9
    assert np.abs(out.var(axis=0) - gamma**2).max() < 1e-6


def test_batchnorm_running_stat_update():
    state = BatchNormState(gamma=np.ones(1), beta=np.zeros(1),
                           running_mean=np.zeros(1), running_var=np.ones(1),
                           momentum=0.9, eps=1e-5)
    x = np.array([[0.0], [2.0]])  # batch mean 1, batch var 1
    batchnorm_forward(x, state, "train")
    assert abs(state.running_mean[0] - (0.9 * 0.0 + 0.1 * 1.0)) < 1e-15
    assert abs(state.running_var[0] - (0.9 * 1.0 + 0.1 * 1.0)) < 1e-15


def test_batchnorm_update_suppression():
    state = BatchNormState.identity(2)
    before = (state.running_mean.copy(), state.running_var.copy())
    _batchnorm_forward_cached(np.random.default_rng(2).normal(size=(8, 2)),
                              state, "train", update_running=False)
    assert np.array_equal(state.running_mean, before[0])
    assert np.array_equal(state.running_var, before[1])


def test_batchnorm_infer_uses_running_stats_and_never_mutates():
    state = BatchNormState(gamma=np.array([2.0]), beta=np.array([1.0]),
                           running_mean=np.array([3.0]), running_var=np.array([4.0]),
                           momentum=0.9, eps=0.0 + 1e-12)
    out = batchnorm_forward(np.array([[5.0]]), state, "infer")
    assert abs(out[0, 0] - (2.0 * (5.0 - 3.0) / np.sqrt(4.0 + 1e-12) + 1.0)) < 1e-12
    assert state.running_mean[0] == 3.0 and state.running_var[0] == 4.0


def test_batchnorm_degenerate_batch():
    with pytest.raises(InsufficientDataError):
        batchnorm_forward(np.zeros((1, 2)), BatchNormState.identity(2), "train")


def test_batchnorm_rejects_nonpositive_eps():
    with pytest.raises(ConfigError):
        BatchNormState(gamma=np.ones(1), beta=np.zeros(1),
                       running_mean=np.zeros(1), running_var=np.ones(1),
                       momentum=0.9, eps=0.0)


def test_batchnorm_backward_matches_finite_diff():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(6, 2))
    gamma = rng.normal(size=2) + 2.0
    beta = rng.normal(size=2)
    c = rng.normal(size=(6, 2))

    def f(theta):
        st = BatchNormState(gamma=theta[:2].copy(), beta=theta[2:4].copy(),
                            running_mean=np.zeros(2), running_var=np.ones(2),
                            momentum=0.9, eps=1e-5)
        xt = theta[4:].reshape(6, 2)
        out, _ = _batchnorm_forward_cached(xt, st, "train", update_running=False)
        return float((out * c).sum())

    theta0 = np.concatenate([gamma, beta, x.ravel()])
    num = finite_diff_grad(f, theta0, 1e-5)
    state = BatchNormState(gamma=gamma.copy(), beta=beta.copy(),
                           running_mean=np.zeros(2), running_var=np.ones(2),
                           momentum=0.9, eps=1e-5)
    _, cache = _batchnorm_forward_cached(x, state, "train", update_running=False)
    dx, dgamma, dbeta = batchnorm_backward(c, cache)
    ana = np.concatenate([dgamma, dbeta, dx.ravel()])
    denom = np.linalg.norm(ana) + np.linalg.norm(num)
    assert np.linalg.norm(ana - num) / denom < 1e-7


# ---------------------------------------------------------------------------
# small pieces


def test_relu_and_tanh_grad():
    assert np.array_equal(relu(np.array([-2.0, 0.0, 3.0])), [0.0, 0.0, 3.0])
    y = np.tanh(np.array([0.3, -1.2]))
    assert np.allclose(tanh_grad_from_output(y), 1.0 - y**2)


def test_cosine_similarity_relu_cases():
    assert abs(cosine_similarity_relu(np.array([1.0, 1.0]), np.array([1.0, 1.0]), 1e-15) - 1.0) < 1e-9
    assert cosine_similarity_relu(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1e-8) == 0.0
    assert cosine_similarity_relu(np.array([-1.0, -1.0]), np.array([1.0, 1.0]), 1e-8) == 0.0


def test_cosine_similarity_relu_hand_value():
    # (3,4)x(4,3): dot 24, norms 5 and 5 -> 0.96 as eps -> 0
    got = cosine_similarity_relu(np.array([3.0, 4.0]), np.array([4.0, 3.0]), 1e-15)
    assert abs(got - 0.96) < 1e-12


def test_cosine_similarity_symmetric_and_bounded():
    rng = np.random.default_rng(3)
    for _ in range(100):
        u = rng.normal(size=4)
        v = rng.normal(size=4)
        a = cosine_similarity_relu(u, v, 1e-8)
        b = cosine_similarity_relu(v, u, 1e-8)
        assert a == b
        assert 0.0 <= a <= 1.0


def test_clamp_prob_bounds():
    p = clamp_prob(np.array([0.0, 0.5, 1.0]))
    assert p[0] == 1e-7 and p[1] == 0.5 and p[2] == 1.0 - 1e-7


# ---------------------------------------------------------------------------
# finite differences


def test_finite_diff_square():
    got = finite_diff_grad(lambda t: float(t[0] ** 2), np.array([3.0]), 1e-5)
    assert abs(got[0] - 6.0) < 1e-8


def test_finite_diff_constant():
    got = finite_diff_grad(lambda t: 7.0, np.array([1.0, 2.0, 3.0]), 1e-5)
    assert np.array_equal(got, np.zeros(3))


def test_finite_diff_product():
    got = finite_diff_grad(lambda t: float(t[0] * t[1]), np.array([2.0, 5.0]), 1e-5)
    assert np.abs(got - [5.0, 2.0]).max() < 1e-8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_diff_nonfinite_names_coordinate():
    def f(t):
        return float(np.log(t[1]))  # blows up when t[1] crosses 0

    with pytest.raises(NumericalError) as exc:
        finite_diff_grad(f, np.array([1.0, 5e-6]), 1e-5)
    assert "1" in str(exc.value)
