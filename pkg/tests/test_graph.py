"""AU relation-graph branch: node projections, kNN graph construction,
graph convolution, anchored activations, and the full pipeline against an
independently coded straight-line oracle."""

import numpy as np
import pytest

from mtaffect.errors import ConfigError, ShapeError
from mtaffect.graph import (
    AU_LABELS,
    AU_NUMBERS,
    AnflParams,
    FacialGraph,
    anfl_backward,
    anfl_forward,
    au_activations,
    build_facial_graph,
    dot_export,
    gcn_forward,
    node_features,
)


def tiny_params(rng, n=3, d=2, feat=4, k=1):
    return AnflParams.init(rng, feat_dim=feat, node_dim=d, n_nodes=n, k=k)


# ---------------------------------------------------------------------------
# node features


def test_node_features_zero_weights():
    p = AnflParams(au_w=np.zeros((3, 2, 4)), au_b=np.zeros((3, 2)),
                   gcn_w=np.eye(2), anchors=np.ones((3, 2)), k=1)
    assert np.array_equal(node_features(np.ones(4), p), np.zeros((3, 2)))


def test_node_features_relu_clips_negative_bias():
    p = AnflParams(au_w=np.zeros((3, 2, 4)), au_b=np.full((3, 2), -1.0),
                   gcn_w=np.eye(2), anchors=np.ones((3, 2)), k=1)
    assert np.array_equal(node_features(np.ones(4), p), np.zeros((3, 2)))


def test_node_features_hand_value():
    # W row (1,1), x=(2,3) -> 5
    p = AnflParams(au_w=np.array([[[1.0, 1.0]], [[0.0, 0.0]]]),
                   au_b=np.zeros((2, 1)), gcn_w=np.eye(1),
                   anchors=np.ones((2, 1)), k=1)
    v = node_features(np.array([2.0, 3.0]), p)
    assert v[0, 0] == 5.0 and v[1, 0] == 0.0


# ---------------------------------------------------------------------------
# graph construction


def test_graph_k_equals_n_minus_1_fully_connected():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(3, 4))
    g = build_facial_graph(v, 2)
    assert np.array_equal(g.adjacency, np.ones((3, 3)))


def test_graph_tie_breaks_to_lower_index():
    # rows (1,0),(1,0),(0,1): w12=1, w13=w23=0. node3 ties between 1 and 2,
    # must pick node1. edges {1-2, 1-3} plus self-loops.
    v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    g = build_facial_graph(v, 1)
    want = np.array([[1.0, 1.0, 1.0],
                     [1.0, 1.0, 0.0],
                     [1.0, 0.0, 1.0]])
    assert np.array_equal(g.adjacency, want)


def test_graph_symmetric_with_self_loops():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(3, 12))
        k = int(rng.integers(1, n))
        v = rng.normal(size=(n, 5))
        g = build_facial_graph(v, k)
        assert np.array_equal(g.adjacency, g.adjacency.T)
        assert np.array_equal(np.diag(g.adjacency), np.ones(n))
        # every node keeps at least k neighbors, at most n-1
        off = g.adjacency - np.eye(n)
        counts = off.sum(axis=1)
        assert (counts >= k).all() and (counts <= n - 1).all()


def test_graph_normalization_is_symmetric_inv_sqrt_degree():
    v = np.random.default_rng(2).normal(size=(4, 3))
    g = build_facial_graph(v, 2)
    deg = g.adjacency.sum(axis=1)
    want = g.adjacency / np.sqrt(np.outer(deg, deg))
    assert np.abs(g.normalized - want).max() < 1e-15


def test_graph_scale_invariant_topology():
    rng = np.random.default_rng(3)
    for _ in range(20):
        v = rng.normal(size=(6, 4))
        a = build_facial_graph(v, 2).adjacency
        b = build_facial_graph(v * float(rng.uniform(0.1, 10.0)), 2).adjacency
        assert np.array_equal(a, b)


def test_graph_permutation_equivariance():
    rng = np.random.default_rng(4)
    v = rng.normal(size=(5, 3))
    # add distinct row norms so the topology has no ties to worry about
    v = v * np.array([1.0, 1.3, 1.7, 2.1, 2.9])[:, None]
    perm = rng.permutation(5)
    a = build_facial_graph(v, 2).adjacency
    b = build_facial_graph(v[perm], 2).adjacency
    assert np.array_equal(b, a[np.ix_(perm, perm)])


def test_graph_k_out_of_range():
    v = np.zeros((3, 2))
    with pytest.raises(ConfigError):
        build_facial_graph(v, 0)
    with pytest.raises(ConfigError):
        build_facial_graph(v, 3)


# ---------------------------------------------------------------------------
# graph convolution


def test_gcn_single_node_identity_weight_doubles():
    g = FacialGraph(adjacency=np.ones((1, 1)), normalized=np.ones((1, 1)))
    v = np.array([[3.0, -2.0]])
    out = gcn_forward(v, g, np.eye(2))
    assert np.array_equal(out, 2.0 * v)


def test_gcn_zero_weight_residual_passthrough():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(4, 3))
    g = build_facial_graph(v, 2)
    assert np.array_equal(gcn_forward(v, g, np.zeros((3, 3))), v)


def test_gcn_permutation_equivariance():
    rng = np.random.default_rng(6)
    v = rng.normal(size=(5, 3))
    w = rng.normal(size=(3, 3))
    g = build_facial_graph(v, 2)
    perm = rng.permutation(5)
    gp = FacialGraph(adjacency=g.adjacency[np.ix_(perm, perm)],
                     normalized=g.normalized[np.ix_(perm, perm)])
    assert np.abs(gcn_forward(v, g, w)[perm] - gcn_forward(v[perm], gp, w)).max() < 1e-14


# ---------------------------------------------------------------------------
# activations


def test_au_activations_self_similarity():
    rng = np.random.default_rng(7)
    v = rng.uniform(0.5, 2.0, size=(4, 3))
    acts = au_activations(v, v)
    assert np.abs(acts - 1.0).max() < 1e-6


def test_au_activations_orthogonal_zero():
    v = np.array([[1.0, 0.0]])
    s = np.array([[0.0, 1.0]])
    assert au_activations(v, s)[0] == 0.0


def test_au_activations_hand_cosine():
    got = au_activations(np.array([[3.0, 4.0]]), np.array([[4.0, 3.0]]))
    assert abs(got[0] - 24.0 / (25.0 + 1e-8)) < 1e-15


def test_au_activations_bounded():
    rng = np.random.default_rng(8)
    for _ in range(50):
        v = rng.normal(size=(6, 4))
        s = rng.normal(size=(6, 4))
        acts = au_activations(v, s)
        assert (acts >= 0.0).all() and (acts <= 1.0).all()


# ---------------------------------------------------------------------------
# full pipeline vs straight-line oracle


def _oracle_pipeline(x, params, eps=1e-8):
    """Independent re-derivation at N=2: every step written out longhand
    with explicit loops, no shared code with the library implementation."""
    n, d, feat = params.au_w.shape
    v = np.zeros((n, d))
    for i in range(n):
        for a in range(d):
            acc = params.au_b[i, a]
            for b in range(feat):
                acc += params.au_w[i, a, b] * x[b]
            v[i, a] = max(acc, 0.0)
    # k=1, n=2: each node's sole candidate neighbor is the other node
    adj = np.ones((2, 2))
    deg = adj.sum(axis=1)
    norm = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            norm[i, j] = adj[i, j] / np.sqrt(deg[i] * deg[j])
    m = norm @ v
    v_fgg = m @ params.gcn_w + v
    act = np.zeros(n)
    for i in range(n):
        u = np.maximum(v_fgg[i], 0.0)
        s = np.maximum(params.anchors[i], 0.0)
        act[i] = (u @ s) / (np.linalg.norm(u) * np.linalg.norm(s) + eps)
    return act


def test_pipeline_matches_straight_line_oracle():
    rng = np.random.default_rng(9)
    for _ in range(25):
        params = AnflParams.init(rng, feat_dim=2, node_dim=2, n_nodes=2, k=1)
        x = rng.normal(size=(1, 2))
        got = anfl_forward(x, params).act[0]
        want = _oracle_pipeline(x[0], params)
        assert np.abs(got - want).max() < 1e-12


def test_pipeline_batch_matches_per_sample():
    rng = np.random.default_rng(10)
    params = AnflParams.init(rng, feat_dim=5, node_dim=3, n_nodes=4, k=2)
    x = rng.normal(size=(6, 5))
    batch = anfl_forward(x, params).act
    for i in range(6):
        single = anfl_forward(x[i:i + 1], params).act[0]
        assert np.abs(batch[i] - single).max() < 1e-14


def test_backward_shapes_and_zero_probe():
    rng = np.random.default_rng(11)
    params = AnflParams.init(rng, feat_dim=5, node_dim=3, n_nodes=4, k=2)
    x = rng.normal(size=(3, 5))
    cache = anfl_forward(x, params)
    g = anfl_backward(np.zeros_like(cache.act), cache, params)
    for key, ref in (("au_w", params.au_w), ("au_b", params.au_b),
                     ("gcn_w", params.gcn_w), ("anchors", params.anchors)):
        assert g[key].shape == ref.shape
        assert not g[key].any()
    assert g["x"].shape == x.shape


# ---------------------------------------------------------------------------
# constants and export


def test_au_ordering():
    assert AU_NUMBERS == (1, 2, 4, 6, 7, 10, 12, 15, 23, 24, 25, 26)
    assert AU_LABELS[0] == "AU1" and AU_LABELS[-1] == "AU26"


def test_dot_export_lists_nodes_and_undirected_edges():
    v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    g = build_facial_graph(v, 1)
    text = dot_export(g, labels=("AU1", "AU2", "AU4"))
    assert text.startswith("graph ")
    assert "AU1;" in text and "AU4;" in text
    assert "AU1 -- AU2;" in text and "AU1 -- AU4;" in text
    assert "AU2 -- AU4" not in text
    assert "--" in text and "->" not in text
    # self-loops are structural, not worth drawing
    assert "AU1 -- AU1" not in text


def test_dot_export_default_labels_are_au_names():
    rng = np.random.default_rng(12)
    params = AnflParams.init(rng, feat_dim=6, node_dim=4, n_nodes=12, k=3)
    v = node_features(rng.normal(size=6), params)
    g = build_facial_graph(v, 3)
    text = dot_export(g)
    for label in AU_LABELS:
        assert f"{label};" in text
