"""Relation-aware action-unit branch.

Per-AU linear projections produce one feature vector per action unit, a
k-nearest-neighbor graph is built from pairwise dot-product similarity, a
single residual graph-convolution pass mixes neighboring AU features, and
each AU's activation is the rectified cosine similarity between its mixed
feature and a trainable anchor vector.

Graph topology is data-dependent but treated as a constant during
backpropagation: gradients flow through the node features, never through
the neighbor selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .linalg import COSINE_EPS_DEFAULT, as_matrix, as_vector, relu

AU_NUMBERS = (1, 2, 4, 6, 7, 10, 12, 15, 23, 24, 25, 26)
AU_LABELS = tuple(f"AU{n}" for n in AU_NUMBERS)


@dataclass
class AnflParams:
    """Trainable tensors of the AU branch."""

    au_w: np.ndarray      # [N, d, D] per-AU projection weights
    au_b: np.ndarray      # [N, d] per-AU projection biases
    gcn_w: np.ndarray     # [d, d] shared graph-convolution weight
    anchors: np.ndarray   # [N, d] similarity anchors, one per AU
    k: int = 3

    def __post_init__(self):
        self.au_w = np.asarray(self.au_w, dtype=np.float64)
        self.au_b = np.asarray(self.au_b, dtype=np.float64)
        self.gcn_w = np.asarray(self.gcn_w, dtype=np.float64)
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        if self.au_w.ndim != 3:
            raise ShapeError(f"au_w must be [N, d, D], got shape {self.au_w.shape}")
        n, d, _ = self.au_w.shape
        if self.au_b.shape != (n, d):
            raise ShapeError(
                f"au_b shape {self.au_b.shape} does not match au_w shape {self.au_w.shape}")
        if self.gcn_w.shape != (d, d):
            raise ShapeError(
                f"gcn_w shape {self.gcn_w.shape} must be square of width {d}")
        if self.anchors.shape != (n, d):
            raise ShapeError(
                f"anchors shape {self.anchors.shape} does not match au_w shape {self.au_w.shape}")
        if not 1 <= self.k <= n - 1:
            raise ConfigError(f"k must lie in [1, N-1] = [1, {n - 1}], got {self.k}")

    @property
    def n_nodes(self) -> int:
        return self.au_w.shape[0]

    @property
    def node_dim(self) -> int:
        return self.au_w.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.au_w.shape[2]

    @classmethod
    def init(cls, rng: np.random.Generator, feat_dim: int, node_dim: int = 64,
             n_nodes: int = 12, k: int = 3) -> "AnflParams":
        scale = 1.0 / np.sqrt(feat_dim)
        return cls(
            au_w=rng.standard_normal((n_nodes, node_dim, feat_dim)) * scale,
            au_b=np.zeros((n_nodes, node_dim)),
            gcn_w=rng.standard_normal((node_dim, node_dim)) / np.sqrt(node_dim),
            anchors=rng.standard_normal((n_nodes, node_dim)),
            k=k,
        )


@dataclass
class FacialGraph:
    """Binary adjacency with self-loops plus its symmetric normalization."""

    adjacency: np.ndarray   # [N, N], entries in {0, 1}, unit diagonal
    normalized: np.ndarray  # Deg^{-1/2} A Deg^{-1/2}


# ---------------------------------------------------------------------------
# forward ops (single sample; batched variants below)


def node_features(x: np.ndarray, params: AnflParams) -> np.ndarray:
    """Per-AU projections of one feature vector: row i is relu(W_i x + b_i)."""
    x = as_vector(x, "x")
    if x.shape[0] != params.feat_dim:
        raise ShapeError(
            f"node_features: x has length {x.shape[0]}, expected {params.feat_dim}")
    z = np.einsum("ndD,D->nd", params.au_w, x) + params.au_b
    return relu(z)


def build_facial_graph(v: np.ndarray, k: int) -> FacialGraph:
    """kNN graph over AU feature rows using dot-product similarity.

    Each node keeps its k largest-similarity neighbors, self excluded, ties
    broken toward the lower node index. The directed selection is
    symmetrized by union, self-loops are added, and the adjacency is
    normalized as Deg^{-1/2} A Deg^{-1/2}.
    """
    v = as_matrix(v, "node features")
    n = v.shape[0]
    if not 1 <= k <= n - 1:
        raise ConfigError(f"k must lie in [1, N-1] = [1, {n - 1}], got {k}")
    adj, norm = _build_graphs_batch(v[None, :, :], k)
    return FacialGraph(adjacency=adj[0], normalized=norm[0])


def _build_graphs_batch(v: np.ndarray, k: int):
    """Vectorized graph construction. v: [B, N, d] -> (adj, norm) [B, N, N]."""
    b, n, _ = v.shape
    sim = v @ v.transpose(0, 2, 1)
    np.einsum("bii->bi", sim)[...] = -np.inf  # exclude self from selection
    # stable sort on negated weights: descending weight, ties to lower index
    order = np.argsort(-sim, axis=-1, kind="stable")
    picks = order[:, :, :k]
    adj = np.zeros((b, n, n))
    bi = np.arange(b)[:, None, None]
    ri = np.arange(n)[None, :, None]
    adj[bi, ri, picks] = 1.0
    adj = np.maximum(adj, adj.transpose(0, 2, 1))  # union symmetrization
    np.einsum("bii->bi", adj)[...] = 1.0           # self-loops
    deg = adj.sum(axis=-1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    norm = adj * inv_sqrt[:, :, None] * inv_sqrt[:, None, :]
    return adj, norm


def gcn_forward(v: np.ndarray, graph: FacialGraph, gcn_w: np.ndarray) -> np.ndarray:
    """One residual graph-convolution pass: normalized @ v @ gcn_w + v."""
    v = as_matrix(v, "node features")
    gcn_w = as_matrix(gcn_w, "gcn_w")
    n, d = v.shape
    if graph.normalized.shape != (n, n):
        raise ShapeError(
            f"gcn: graph is over {graph.normalized.shape[0]} nodes, features over {n}")
    if gcn_w.shape != (d, d):
        raise ShapeError(f"gcn: weight shape {gcn_w.shape} must be ({d}, {d})")
    return graph.normalized @ v @ gcn_w + v


def au_activations(v_fgg: np.ndarray, anchors: np.ndarray,
                   eps: float = COSINE_EPS_DEFAULT) -> np.ndarray:
    """Rectified cosine similarity of each AU row with its anchor, in [0, 1]."""
    v_fgg = as_matrix(v_fgg, "v_fgg")
    anchors = as_matrix(anchors, "anchors")
    if v_fgg.shape != anchors.shape:
        raise ShapeError(
            f"au_activations: features shape {v_fgg.shape} does not match "
            f"anchors shape {anchors.shape}")
    act, _ = _activations_batch(v_fgg[None, :, :], anchors, eps)
    return act[0]


def _activations_batch(v_fgg: np.ndarray, anchors: np.ndarray, eps: float):
    p = relu(v_fgg)                      # [B, N, d]
    anchors_r = relu(anchors)            # [N, d]
    dot = np.einsum("bnd,nd->bn", p, anchors_r)
    nu = np.linalg.norm(p, axis=-1)      # [B, N]
    nv = np.linalg.norm(anchors_r, axis=-1)  # [N]
    q = nu * nv[None, :] + eps
    act = dot / q
    cache = (p, anchors_r, dot, nu, nv, q)
    return act, cache


# ---------------------------------------------------------------------------
# batched pipeline with cache for the backward pass


@dataclass
class AnflCache:
    x: np.ndarray          # [B, D]
    z: np.ndarray          # [B, N, d] pre-relu projections
    v: np.ndarray          # [B, N, d]
    norm: np.ndarray       # [B, N, N] normalized adjacencies
    m: np.ndarray          # [B, N, d] norm @ v
    v_fgg: np.ndarray      # [B, N, d]
    act_cache: tuple
    act: np.ndarray        # [B, N]


def anfl_forward(x: np.ndarray, params: AnflParams, graphs: np.ndarray | None = None,
                 eps: float = COSINE_EPS_DEFAULT) -> AnflCache:
    """Full AU branch on a batch. x: [B, D] -> activations [B, N].

    graphs, when given, must be precomputed normalized adjacencies
    [B, N, N]; the kNN construction is skipped. The gradient oracle uses
    this to hold topology fixed while parameters are perturbed.
    """
    x = as_matrix(x, "x")
    if x.shape[1] != params.feat_dim:
        raise ShapeError(
            f"anfl: batch has feature dim {x.shape[1]}, expected {params.feat_dim}")
    z = np.einsum("ndD,bD->bnd", params.au_w, x) + params.au_b
    v = relu(z)
    if graphs is None:
        _, norm = _build_graphs_batch(v, params.k)
    else:
        norm = graphs
    m = norm @ v
    v_fgg = m @ params.gcn_w + v
    act, act_cache = _activations_batch(v_fgg, anchors=params.anchors, eps=eps)
    return AnflCache(x=x, z=z, v=v, norm=norm, m=m, v_fgg=v_fgg,
                     act_cache=act_cache, act=act)


def anfl_backward(d_act: np.ndarray, cache: AnflCache, params: AnflParams):
    """Gradients of a scalar loss through the AU branch.

    d_act: [B, N] upstream gradient on the activations. Returns a dict with
    entries au_w, au_b, gcn_w, anchors, and x (gradient on the input batch).
    Topology is constant: nothing flows through the adjacency.
    """
    p, anchors_r, dot, nu, nv, q = cache.act_cache

    # rectified cosine backward, guarding the zero-norm branches
    valid = (nu > 0.0) & (nv[None, :] > 0.0)
    safe_nu = np.where(nu > 0.0, nu, 1.0)
    safe_nv = np.where(nv > 0.0, nv, 1.0)
    g = np.where(valid, d_act, 0.0)
    d_p = g[..., None] * (anchors_r[None, :, :] / q[..., None]
                          - (dot * nv[None, :] / safe_nu / q ** 2)[..., None] * p)
    d_anchor_r = (g[..., None] * (p / q[..., None]
                                  - (dot * nu / safe_nv[None, :] / q ** 2)[..., None]
                                  * anchors_r[None, :, :])).sum(axis=0)
    d_anchors = d_anchor_r * (params.anchors > 0.0)

    d_v_fgg = d_p * (cache.v_fgg > 0.0)

    # residual graph convolution: v_fgg = (norm @ v) @ gcn_w + v
    d_m = d_v_fgg @ params.gcn_w.T
    d_gcn_w = np.einsum("bnd,bne->de", cache.m, d_v_fgg)
    d_v = cache.norm.transpose(0, 2, 1) @ d_m + d_v_fgg

    # per-AU projections: v = relu(au_w @ x + au_b)
    d_z = d_v * (cache.z > 0.0)
    d_au_w = np.einsum("bnd,bD->ndD", d_z, cache.x)
    d_au_b = d_z.sum(axis=0)
    d_x = np.einsum("ndD,bnd->bD", params.au_w, d_z)

    return {"au_w": d_au_w, "au_b": d_au_b, "gcn_w": d_gcn_w,
            "anchors": d_anchors, "x": d_x}


# ---------------------------------------------------------------------------
# inspection


def dot_export(graph: FacialGraph, labels: tuple[str, ...] | None = None) -> str:
    """Render the adjacency as undirected DOT text.

    Self-loops are present on every node and are omitted from the listing.
    """
    n = graph.adjacency.shape[0]
    if labels is None:
        labels = AU_LABELS if n == len(AU_LABELS) else tuple(f"v{i}" for i in range(n))
    if len(labels) != n:
        raise ShapeError(f"dot_export: {len(labels)} labels for {n} nodes")
    lines = ["graph facial {"]
    for name in labels:
        lines.append(f"  {name};")
    for i in range(n):
        for j in range(i + 1, n):
            if graph.adjacency[i, j] != 0.0:
                lines.append(f"  {labels[i]} -- {labels[j]};")
    lines.append("}")
    return "\n".join(lines) + "\n"
