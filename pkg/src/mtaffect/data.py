"""Datasets of precomputed facial feature vectors with partial labels.

Two delimited files describe a dataset. features.csv has header
``id,f0,...,f{D-1}`` with one finite float per feature column. labels.csv
has the fixed header ``id,au1,au2,au4,au6,au7,au10,au12,au15,au23,au24,
au25,au26,expr,valence,arousal``. Missing annotations use sentinels: -1 for
AU entries and the expression index, -5.0 for the valence/arousal pair
(always missing together). Both files must cover exactly the same ids; the
features file fixes the sample order.

The synthetic generator embeds a 22-dimensional signal (8-way expression
one-hot, 12 AU bits, the expression's valence/arousal centroid) through a
fixed random linear map plus Gaussian noise, so at noise 0 the features are
an exact linear function of the labels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .graph import AU_NUMBERS
from .metrics import AU_MISSING, EXPR_MISSING, N_AU, N_EXPR, VA_MISSING

SIGNAL_DIM = N_EXPR + N_AU + 2  # one-hot + AU bits + VA pair

LABEL_HEADER = (["id"] + [f"au{n}" for n in AU_NUMBERS] + ["expr", "valence", "arousal"])

# AU occurrence probability per expression class, rows in expression order
# (neutral, anger, disgust, fear, happiness, sadness, surprise, other),
# columns in AU order (1, 2, 4, 6, 7, 10, 12, 15, 23, 24, 25, 26).
DEFAULT_PROTOTYPES = np.array([
    [.05, .05, .05, .05, .05, .05, .05, .05, .05, .05, .05, .05],
    [.05, .05, .90, .05, .90, .05, .05, .05, .90, .90, .05, .05],
    [.05, .05, .90, .05, .05, .90, .05, .90, .05, .05, .05, .05],
    [.90, .90, .90, .05, .90, .05, .05, .05, .05, .05, .90, .05],
    [.05, .05, .05, .90, .05, .05, .90, .05, .05, .05, .90, .05],
    [.90, .05, .90, .05, .05, .05, .05, .90, .05, .05, .05, .05],
    [.90, .90, .05, .05, .05, .05, .05, .05, .05, .05, .90, .90],
    [.05, .05, .05, .50, .05, .50, .05, .05, .50, .05, .50, .05],
])

# valence/arousal centroid per expression class, same row order
VA_CENTROIDS = np.array([
    [0.0, 0.0],
    [-0.6, 0.6],
    [-0.6, 0.3],
    [-0.5, 0.7],
    [0.8, 0.5],
    [-0.7, -0.4],
    [0.2, 0.8],
    [0.1, 0.1],
])


@dataclass
class Sample:
    id: str
    feature: np.ndarray   # [D] float64
    au: np.ndarray        # [12] int64 in {0, 1, -1}
    expr: int             # 0..7 or -1
    va: np.ndarray        # [2] float64 in [-1, 1] or both -5.0

    @property
    def has_au(self) -> bool:
        return bool(np.any(self.au != AU_MISSING))

    @property
    def has_expr(self) -> bool:
        return self.expr != EXPR_MISSING

    @property
    def has_va(self) -> bool:
        return self.va[0] != VA_MISSING


@dataclass
class Dataset:
    samples: list
    dim: int
    au_rates: np.ndarray = field(init=False)    # NaN where an AU has no valid labels
    expr_freqs: np.ndarray = field(init=False)  # NaN everywhere if no valid labels

    def __post_init__(self):
        self._recompute_stats()

    def __len__(self) -> int:
        return len(self.samples)

    def _recompute_stats(self):
        """Occurrence rates from valid labels only."""
        self.au_rates = np.full(N_AU, np.nan)
        if self.samples:
            au = np.stack([s.au for s in self.samples])
            for j in range(N_AU):
                valid = au[:, j] != AU_MISSING
                if np.any(valid):
                    self.au_rates[j] = au[valid, j].mean()
        exprs = np.array([s.expr for s in self.samples if s.has_expr], dtype=np.int64)
        if exprs.size:
            self.expr_freqs = np.bincount(exprs, minlength=N_EXPR) / exprs.size
        else:
            self.expr_freqs = np.full(N_EXPR, np.nan)


def task_view(ds: Dataset, task: str) -> list:
    """Samples carrying labels for the given task ('au', 'ex', or 'va')."""
    if task == "au":
        return [s for s in ds.samples if s.has_au]
    if task == "ex":
        return [s for s in ds.samples if s.has_expr]
    if task == "va":
        return [s for s in ds.samples if s.has_va]
    raise ConfigError(f"unknown task {task!r}, expected 'au', 'ex', or 'va'")


def feature_matrix(samples: list) -> np.ndarray:
    return np.stack([s.feature for s in samples])


def au_label_matrix(samples: list) -> np.ndarray:
    return np.stack([s.au for s in samples])


def expr_label_array(samples: list) -> np.ndarray:
    return np.array([s.expr for s in samples], dtype=np.int64)


def va_label_matrix(samples: list) -> np.ndarray:
    return np.stack([s.va for s in samples])


# ---------------------------------------------------------------------------
# delimited I/O


def _fmt(v: float) -> str:
    return repr(float(v))


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def load_dataset(features_path, labels_path) -> Dataset:
    """Load and join the two files. Raises DataError naming file and line."""
    features_path = Path(features_path)
    labels_path = Path(labels_path)
    frows = _read_rows(features_path)
    if not frows:
        raise DataError(f"{features_path}: empty file")
    header = frows[0]
    dim = len(header) - 1
    if dim < 1 or header != ["id"] + [f"f{i}" for i in range(dim)]:
        raise DataError(f"{features_path} line 1: header must be id,f0,...,f{{D-1}}")
    ids: list[str] = []
    feats: dict[str, np.ndarray] = {}
    for lineno, row in enumerate(frows[1:], start=2):
        if len(row) != dim + 1:
            raise DataError(
                f"{features_path} line {lineno}: expected {dim + 1} columns, got {len(row)}")
        sid = row[0]
        if sid in feats:
            raise DataError(f"{features_path} line {lineno}: duplicate id {sid!r}")
        try:
            vec = np.array([float(v) for v in row[1:]], dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"{features_path} line {lineno}: {exc}") from exc
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{features_path} line {lineno}: non-finite feature value")
        ids.append(sid)
        feats[sid] = vec

    label_ids, labels = load_labels(labels_path)
    unknown = [sid for sid in label_ids if sid not in feats]
    if unknown:
        raise DataError(
            f"{labels_path}: id {unknown[0]!r} not present in features file")
    missing = [sid for sid in ids if sid not in labels]
    if missing:
        raise DataError(f"{labels_path}: no label row for id {missing[0]!r}")

    samples = [Sample(sid, feats[sid], *labels[sid]) for sid in ids]
    return Dataset(samples=samples, dim=dim)


def load_labels(labels_path):
    """Parse a labels file alone. Returns (ids in file order, id -> (au, expr, va))."""
    labels_path = Path(labels_path)
    lrows = _read_rows(labels_path)
    if not lrows:
        raise DataError(f"{labels_path}: empty file")
    if lrows[0] != LABEL_HEADER:
        raise DataError(
            f"{labels_path} line 1: header must be {','.join(LABEL_HEADER)}")
    order: list[str] = []
    labels: dict[str, tuple] = {}
    for lineno, row in enumerate(lrows[1:], start=2):
        if len(row) != len(LABEL_HEADER):
            raise DataError(
                f"{labels_path} line {lineno}: expected {len(LABEL_HEADER)} columns, "
                f"got {len(row)}")
        sid = row[0]
        if sid in labels:
            raise DataError(f"{labels_path} line {lineno}: duplicate id {sid!r}")
        try:
            au = np.array([int(v) for v in row[1:1 + N_AU]], dtype=np.int64)
            expr = int(row[1 + N_AU])
            va = np.array([float(row[2 + N_AU]), float(row[3 + N_AU])], dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"{labels_path} line {lineno}: {exc}") from exc
        if not np.all((au == 0) | (au == 1) | (au == AU_MISSING)):
            raise DataError(
                f"{labels_path} line {lineno}: AU entries must be 0, 1, or {AU_MISSING}")
        if not (expr == EXPR_MISSING or 0 <= expr < N_EXPR):
            raise DataError(
                f"{labels_path} line {lineno}: expr must lie in [0, {N_EXPR}) "
                f"or be {EXPR_MISSING}")
        if np.all(va == VA_MISSING):
            pass
        elif np.any(va == VA_MISSING):
            raise DataError(
                f"{labels_path} line {lineno}: valence and arousal are missing together")
        elif not np.all(np.isfinite(va)) or np.any(va < -1.0) or np.any(va > 1.0):
            raise DataError(
                f"{labels_path} line {lineno}: valence/arousal must lie in [-1, 1]")
        order.append(sid)
        labels[sid] = (au, expr, va)
    return order, labels


def save_dataset(ds: Dataset, features_path, labels_path) -> None:
    with open(features_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"f{i}" for i in range(ds.dim)])
        for s in ds.samples:
            w.writerow([s.id] + [_fmt(v) for v in s.feature])
    with open(labels_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LABEL_HEADER)
        for s in ds.samples:
            w.writerow([s.id] + [str(int(v)) for v in s.au] + [str(int(s.expr))]
                       + [_fmt(s.va[0]), _fmt(s.va[1])])


def write_predictions(path, ids, au_probs, expr_pred, va_pred) -> None:
    """Predictions in the label schema: AU probabilities, class index, VA."""
    au_probs = np.asarray(au_probs, dtype=np.float64)
    va_pred = np.asarray(va_pred, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LABEL_HEADER)
        for i, sid in enumerate(ids):
            w.writerow([sid] + [_fmt(v) for v in au_probs[i]]
                       + [str(int(expr_pred[i]))]
                       + [_fmt(va_pred[i, 0]), _fmt(va_pred[i, 1])])


def load_predictions(path):
    """Read a predictions file. Returns (ids, au_probs, expr_pred, va_pred)."""
    path = Path(path)
    rows = _read_rows(path)
    if not rows:
        raise DataError(f"{path}: empty file")
    if rows[0] != LABEL_HEADER:
        raise DataError(f"{path} line 1: header must be {','.join(LABEL_HEADER)}")
    ids, au_list, expr_list, va_list = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(LABEL_HEADER):
            raise DataError(
                f"{path} line {lineno}: expected {len(LABEL_HEADER)} columns, got {len(row)}")
        if row[0] in set(ids):
            raise DataError(f"{path} line {lineno}: duplicate id {row[0]!r}")
        try:
            au = np.array([float(v) for v in row[1:1 + N_AU]], dtype=np.float64)
            expr = int(row[1 + N_AU])
            va = np.array([float(row[2 + N_AU]), float(row[3 + N_AU])], dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"{path} line {lineno}: {exc}") from exc
        if not np.all(np.isfinite(au)) or np.any(au < 0.0) or np.any(au > 1.0):
            raise DataError(
                f"{path} line {lineno}: AU predictions must be probabilities in [0, 1]")
        if not 0 <= expr < N_EXPR:
            raise DataError(
                f"{path} line {lineno}: predicted expr must lie in [0, {N_EXPR})")
        if not np.all(np.isfinite(va)):
            raise DataError(f"{path} line {lineno}: non-finite valence/arousal prediction")
        ids.append(row[0])
        au_list.append(au)
        expr_list.append(expr)
        va_list.append(va)
    if not ids:
        raise DataError(f"{path}: no prediction rows")
    return (ids, np.stack(au_list), np.array(expr_list, dtype=np.int64),
            np.stack(va_list))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    """Parameters of the synthetic generator; labels are fully populated."""

    n_samples: int
    dim: int
    seed: int = 0
    noise_scale: float = 0.1
    prototypes: np.ndarray = field(default_factory=lambda: DEFAULT_PROTOTYPES.copy())
    va_centroids: np.ndarray = field(default_factory=lambda: VA_CENTROIDS.copy())

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.va_centroids = np.asarray(self.va_centroids, dtype=np.float64)
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be positive, got {self.n_samples}")
        if self.dim < SIGNAL_DIM:
            raise ConfigError(
                f"dim must be at least {SIGNAL_DIM} to embed the label signal, "
                f"got {self.dim}")
        if self.noise_scale < 0.0:
            raise ConfigError(f"noise_scale must be nonnegative, got {self.noise_scale}")
        if self.prototypes.shape != (N_EXPR, N_AU):
            raise ShapeError(
                f"prototypes must be [{N_EXPR}, {N_AU}], got {self.prototypes.shape}")
        if np.any(self.prototypes < 0.0) or np.any(self.prototypes > 1.0):
            raise ConfigError("prototype probabilities must lie in [0, 1]")
        if self.va_centroids.shape != (N_EXPR, 2):
            raise ShapeError(
                f"va_centroids must be [{N_EXPR}, 2], got {self.va_centroids.shape}")
        if np.any(np.abs(self.va_centroids) > 1.0):
            raise ConfigError("va_centroids must lie in [-1, 1]")


def synth_generate(spec: SynthSpec) -> Dataset:
    """Deterministic synthetic dataset from a seed.

    Draw order is fixed: embedding matrix, then expression indices, then AU
    uniforms, then feature noise. Identical specs produce identical bits.
    """
    rng = np.random.default_rng(spec.seed)
    embed = rng.standard_normal((spec.dim, SIGNAL_DIM))
    exprs = rng.integers(0, N_EXPR, size=spec.n_samples)
    au_bits = (rng.random((spec.n_samples, N_AU)) < spec.prototypes[exprs]).astype(np.int64)
    noise = rng.standard_normal((spec.n_samples, spec.dim))

    one_hot = np.zeros((spec.n_samples, N_EXPR))
    one_hot[np.arange(spec.n_samples), exprs] = 1.0
    va = spec.va_centroids[exprs]
    signal = np.concatenate([one_hot, au_bits.astype(np.float64), va], axis=1)
    x = signal @ embed.T + spec.noise_scale * noise

    samples = [
        Sample(id=f"s{i:06d}", feature=x[i], au=au_bits[i],
               expr=int(exprs[i]), va=va[i].copy())
        for i in range(spec.n_samples)
    ]
    return Dataset(samples=samples, dim=spec.dim)


def train_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Seeded shuffle into fixed-size batches; the short tail is dropped."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]
