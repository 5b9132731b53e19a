"""Mini-batch K-Means codebook over patch embeddings.

The fit is fully determined by ``(features, K, config)``: seeding draws from a
single ``numpy`` generator created from ``config.seed`` and every update is
applied in a fixed order (batches in stream order, clusters in index order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .containers import FeatureGrid
from .errors import DegenerateData, DimMismatch, EmptyInput, InvalidConfig, NonFinite, TooFewSamples

_CHUNK_ROWS = 1024


@dataclass
class MiniBatchConfig:
    batch_size: int = 4096
    max_epochs: int = 100
    tol: float = 1e-6
    init_sample_size: int = 65536
    seed: int = 0

    def validate(self, k: int):
        if self.batch_size < k:
            raise InvalidConfig(f"batch_size ({self.batch_size}) must be >= K ({k})")
        if self.tol < 0:
            raise InvalidConfig("tol must be >= 0")
        if self.max_epochs < 1:
            raise InvalidConfig("max_epochs must be >= 1")
        if self.init_sample_size < k:
            raise InvalidConfig(f"init_sample_size ({self.init_sample_size}) must be >= K ({k})")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must fit in 64 unsigned bits")


@dataclass(eq=False)
class ClusterCodebook:
    centroids: np.ndarray
    counts: np.ndarray
    seed: int = 0
    inertia_history: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2 or self.centroids.shape[1] < 1:
            raise DimMismatch(f"codebook needs K >= 2 centroids of dim >= 1, got {self.centroids.shape}")
        if self.counts.shape != (self.k,):
            raise DimMismatch("counts length must equal K")
        if not np.isfinite(self.centroids).all():
            raise NonFinite("codebook centroids must be finite")
        self.inertia_history = [float(v) for v in self.inertia_history]

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ClusterCodebook):
            return NotImplemented
        return (
            self.centroids.tobytes() == other.centroids.tobytes()
            and self.centroids.shape == other.centroids.shape
            and np.array_equal(self.counts, other.counts)
            and self.seed == other.seed
            and self.inertia_history == other.inertia_history
        )


def squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, shape ``(len(x), len(centroids))``.

    Differences are formed explicitly rather than through the
    ``|x|^2 - 2x.c + |c|^2`` expansion so that exact ties stay exact.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty((x.shape[0], centroids.shape[0]), dtype=np.float64)
    for start in range(0, x.shape[0], _CHUNK_ROWS):
        diff = x[start:start + _CHUNK_ROWS, None, :] - centroids[None, :, :]
        out[start:start + _CHUNK_ROWS] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        x = features
    else:
        parts = [f.vectors() if isinstance(f, FeatureGrid) else np.asarray(f) for f in features]
        if not parts:
            raise EmptyInput("no feature vectors supplied")
        x = np.concatenate([p.reshape(-1, p.shape[-1]) for p in parts])
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimMismatch(f"features must be a 2-D (N, dim) array, got shape {x.shape}")
    return x


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator, n_trials: int | None = None) -> np.ndarray:
    """Greedy D^2-weighted seeding. Returns the indices of the chosen rows.

    Each step draws ``n_trials`` candidates (default ``2 + ln K``) with
    probability proportional to their squared distance from the nearest chosen
    seed and keeps the one that lowers the total potential most.
    """
    n = x.shape[0]
    if n_trials is None:
        n_trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(n))]
    closest = squared_distances(x, x[chosen]).ravel()
    while len(chosen) < k:
        cumulative = np.cumsum(closest)
        total = cumulative[-1]
        if total <= 0:
            raise DegenerateData(f"fewer than {k} distinct vectors available for seeding")
        candidates = np.searchsorted(cumulative, rng.random(n_trials) * total, side="right")
        candidates = np.minimum(candidates, n - 1)
        best, best_potential, best_closest = -1, np.inf, None
        for c in candidates.tolist():
            trial = np.minimum(closest, squared_distances(x, x[c:c + 1]).ravel())
            potential = float(trial.sum())
            if potential < best_potential:
                best, best_potential, best_closest = c, potential, trial
        chosen.append(best)
        closest = best_closest
    return np.asarray(chosen)


def init_centroids(features, k: int, cfg: MiniBatchConfig) -> np.ndarray:
    """k-means++ seeding on a uniform subsample of ``cfg.init_sample_size`` rows."""
    x = _as_matrix(features)
    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    if cfg.init_sample_size < n:
        sample = np.sort(rng.choice(n, size=cfg.init_sample_size, replace=False))
        pool = x[sample]
        if np.unique(pool, axis=0).shape[0] < k:
            pool = x
    else:
        pool = x
    return pool[kmeans_plusplus(pool, k, rng)].copy()


def _reseed_empty(x: np.ndarray, centroids: np.ndarray, empty: np.ndarray):
    closest = squared_distances(x, centroids).min(axis=1)
    for k in np.flatnonzero(empty):
        idx = int(np.argmax(closest))
        centroids[k] = x[idx]
        closest = np.minimum(closest, squared_distances(x, centroids[k:k + 1]).ravel())


def fit_codebook(features, k: int, cfg: MiniBatchConfig | None = None, init: np.ndarray | None = None) -> ClusterCodebook:
    """Fit a K-centroid codebook with mini-batch K-Means.

    Parameters
    ----------
    features : array (N, dim), or iterable of FeatureGrid / arrays
        The vectors to quantize, consumed in the given order.
    k : int
        Number of clusters, >= 2.
    cfg : MiniBatchConfig
        Batch size, epoch budget, tolerance, seeding sample size and seed.
    init : array (k, dim), optional
        Explicit starting centroids; k-means++ seeding is skipped.

    Returns
    -------
    ClusterCodebook
        ``counts`` holds the per-cluster assignments of the last epoch and
        ``inertia_history`` the mean squared distance seen during each epoch.

    Notes
    -----
    Each epoch walks the data in consecutive batches. A batch is assigned
    against the centroids as they stand at the start of the batch, then every
    centroid moves to the running mean of the samples assigned to it so far
    in the epoch (``c += (x - c) / n_c``). With ``batch_size >= N`` one epoch
    is therefore exactly one Lloyd iteration. Clusters left empty by an epoch
    are moved onto the sample farthest from its centroid. Fitting stops when
    the mean squared centroid displacement over an epoch drops below
    ``cfg.tol`` (or is exactly zero) or after ``cfg.max_epochs`` epochs.
    """
    cfg = cfg or MiniBatchConfig()
    if k < 2:
        raise InvalidConfig("K must be >= 2")
    cfg.validate(k)
    x = _as_matrix(features)
    n = x.shape[0]
    if n < k:
        raise TooFewSamples(f"need at least K={k} vectors, got {n}")
    if not np.isfinite(x).all():
        raise NonFinite("features contain NaN or Inf")
    if np.unique(x, axis=0).shape[0] < k:
        raise DegenerateData(f"fewer than K={k} distinct vectors")

    if init is None:
        centroids = init_centroids(x, k, cfg)
    else:
        centroids = np.array(init, dtype=np.float64, copy=True)
        if centroids.shape != (k, x.shape[1]):
            raise DimMismatch(f"init must have shape {(k, x.shape[1])}, got {centroids.shape}")

    history = []
    counts = np.zeros(k, dtype=np.int64)
    for _ in range(cfg.max_epochs):
        start_centroids = centroids.copy()
        counts = np.zeros(k, dtype=np.int64)
        sq_total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = x[start:start + cfg.batch_size]
            d2 = squared_distances(batch, centroids)
            labels = np.argmin(d2, axis=1)
            sq_total += float(d2[np.arange(len(batch)), labels].sum())
            for c in np.unique(labels):
                members = batch[labels == c]
                prev = counts[c]
                counts[c] = prev + len(members)
                centroids[c] = (prev * centroids[c] + members.sum(axis=0)) / counts[c]
        history.append(sq_total / n)
        empty = counts == 0
        if empty.any():
            _reseed_empty(x, centroids, empty)
        shift = float(np.mean(np.sum((centroids - start_centroids) ** 2, axis=1)))
        if shift == 0.0 or shift < cfg.tol:
            break

    return ClusterCodebook(centroids=centroids, counts=counts, seed=cfg.seed, inertia_history=history)


def assign_many(codebook: ClusterCodebook, vectors) -> np.ndarray:
    """Nearest-centroid ids for each row; ties go to the smallest cluster index."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.dim:
        raise DimMismatch(f"expected vectors of dim {codebook.dim}, got shape {x.shape}")
    if x.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(squared_distances(x, codebook.centroids), axis=1)


def assign(codebook: ClusterCodebook, vector) -> int:
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != codebook.dim:
        raise DimMismatch(f"expected a vector of dim {codebook.dim}, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise NonFinite("query vector must be finite")
    return int(assign_many(codebook, v[None, :])[0])


def assign_grid(codebook: ClusterCodebook, grid: FeatureGrid) -> np.ndarray:
    """Cluster id per patch, shape ``(grid_h, grid_w)``."""
    if grid.dim != codebook.dim:
        raise DimMismatch(f"grid dim {grid.dim} != codebook dim {codebook.dim}")
    return assign_many(codebook, grid.vectors()).reshape(grid.grid_h, grid.grid_w)


def inertia(codebook: ClusterCodebook, features) -> float:
    """Mean squared distance from each vector to its assigned centroid."""
    x = _as_matrix(features)
    if x.shape[0] == 0:
        raise EmptyInput("inertia of an empty feature set")
    if x.shape[1] != codebook.dim:
        raise DimMismatch(f"expected vectors of dim {codebook.dim}, got {x.shape[1]}")
    return float(squared_distances(x, codebook.centroids).min(axis=1).mean())
