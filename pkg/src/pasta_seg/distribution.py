"""Cluster frequency distributions and the reference-to-mixed ratio test.

A cluster whose share of the anomaly-free reference corpus is (nearly) zero
while it is populated in the mixed corpus marks a visual pattern that only
anomalies produce.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .clustering import ClusterCodebook, assign_grid
from .containers import FeatureGrid
from .errors import DimMismatch, EmptyManifest, InvalidConfig, KMismatch, ValidationError
from .tensor_io import DatasetManifest

log = logging.getLogger(__name__)

DEFAULT_R_THRESHOLD = 0.05
DEFAULT_GAMMA = 0.1


@dataclass(eq=False)
class ClusterDistribution:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or (self.counts < 0).any():
            raise ValidationError("counts must be a 1-D array of non-negative integers")

    @property
    def k(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def probs(self) -> np.ndarray:
        if self.total == 0:
            return np.zeros(self.k)
        return self.counts / self.total

    def __add__(self, other: ClusterDistribution) -> ClusterDistribution:
        if other.k != self.k:
            raise KMismatch(f"cannot add distributions over {self.k} and {other.k} clusters")
        return ClusterDistribution(self.counts + other.counts)

    def __eq__(self, other):
        if not isinstance(other, ClusterDistribution):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)


@dataclass(eq=False)
class AnomalyClusterSet:
    """Anomaly cluster ids, the per-cluster ratios (NaN = undefined) and the cutoff."""

    anomaly_ids: frozenset
    ratios: np.ndarray
    threshold: float

    def __post_init__(self):
        self.anomaly_ids = frozenset(int(i) for i in self.anomaly_ids)
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        if any(i < 0 or i >= len(self.ratios) for i in self.anomaly_ids):
            raise ValidationError("anomaly ids must lie in 0..K-1")

    def mask(self) -> np.ndarray:
        """Boolean lookup table indexed by cluster id."""
        out = np.zeros(len(self.ratios), dtype=bool)
        out[list(self.anomaly_ids)] = True
        return out

    def __eq__(self, other):
        if not isinstance(other, AnomalyClusterSet):
            return NotImplemented
        return (self.anomaly_ids == other.anomaly_ids and self.threshold == other.threshold
                and self.ratios.tobytes() == other.ratios.tobytes())


@dataclass(eq=False)
class PastaModel:
    codebook: ClusterCodebook
    mixed_dist: ClusterDistribution
    ref_dist: ClusterDistribution
    anomaly_set: AnomalyClusterSet
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        k = self.codebook.k
        if not (self.mixed_dist.k == self.ref_dist.k == len(self.anomaly_set.ratios) == k):
            raise KMismatch("codebook, distributions and anomaly set disagree on K")
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidConfig(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def k(self) -> int:
        return self.codebook.k

    @property
    def dim(self) -> int:
        return self.codebook.dim

    def __eq__(self, other):
        if not isinstance(other, PastaModel):
            return NotImplemented
        return (self.codebook == other.codebook and self.mixed_dist == other.mixed_dist
                and self.ref_dist == other.ref_dist and self.anomaly_set == other.anomaly_set
                and self.gamma == other.gamma)


def _tally(codebook: ClusterCodebook, item) -> np.ndarray:
    grid = item if isinstance(item, FeatureGrid) else item.load_grid()
    labels = assign_grid(codebook, grid)
    return np.bincount(labels.ravel(), minlength=codebook.k)


def estimate_distribution(codebook: ClusterCodebook, corpus, threads: int = 1) -> ClusterDistribution:
    """Patch-count histogram of cluster assignments over a whole corpus.

    ``corpus`` is a :class:`DatasetManifest` or a sequence of already loaded
    :class:`FeatureGrid` objects.
    """
    items = list(corpus.records if isinstance(corpus, DatasetManifest) else (corpus or []))
    if not items:
        raise EmptyManifest("cannot estimate a distribution from an empty corpus")
    if isinstance(corpus, DatasetManifest) and corpus.dim != codebook.dim:
        raise DimMismatch(f"manifest dim {corpus.dim} != codebook dim {codebook.dim}")
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda item: _tally(codebook, item), items))
    else:
        parts = [_tally(codebook, item) for item in items]
    # integer sums are order independent
    return ClusterDistribution(np.sum(parts, axis=0))


def compute_ratios(ref_dist: ClusterDistribution, mixed_dist: ClusterDistribution) -> np.ndarray:
    """Reference share over mixed share per cluster; NaN where the mixed share is 0.

    Evaluated as the exact rational ``ref_i * N_mixed / (mixed_i * N_ref)`` and
    rounded once, so equal inputs give bit-identical ratios however they were
    scaled.
    """
    if ref_dist.k != mixed_dist.k:
        raise KMismatch(f"reference has {ref_dist.k} clusters, mixed has {mixed_dist.k}")
    n_ref, n_mixed = ref_dist.total, mixed_dist.total
    out = np.full(ref_dist.k, np.nan)
    for i, (r, m) in enumerate(zip(ref_dist.counts.tolist(), mixed_dist.counts.tolist())):
        if m > 0:
            if n_ref == 0:
                out[i] = 0.0
            else:
                out[i] = (r * n_mixed) / (m * n_ref)
    return out


def define_anomaly_set(ratios, threshold: float = DEFAULT_R_THRESHOLD) -> AnomalyClusterSet:
    """Clusters with a defined ratio strictly below ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidConfig(f"R threshold must lie in [0, 1], got {threshold}")
    ratios = np.asarray(ratios, dtype=np.float64)
    undefined = np.isnan(ratios)
    if undefined.any():
        log.warning("clusters %s are empty in the mixed corpus; treated as nominal",
                    np.flatnonzero(undefined).tolist())
    ids = {i for i, r in enumerate(ratios.tolist()) if not np.isnan(r) and r < threshold}
    return AnomalyClusterSet(anomaly_ids=frozenset(ids), ratios=ratios, threshold=threshold)


def build_model(
    codebook: ClusterCodebook,
    mixed,
    reference,
    r_threshold: float = DEFAULT_R_THRESHOLD,
    gamma: float = DEFAULT_GAMMA,
    threads: int = 1,
) -> PastaModel:
    """Project both corpora through the frozen codebook and flag anomaly clusters."""
    mixed_dist = estimate_distribution(codebook, mixed, threads)
    ref_dist = estimate_distribution(codebook, reference, threads)
    ratios = compute_ratios(ref_dist, mixed_dist)
    return PastaModel(
        codebook=codebook,
        mixed_dist=mixed_dist,
        ref_dist=ref_dist,
        anomaly_set=define_anomaly_set(ratios, r_threshold),
        gamma=gamma,
    )


def histogram_rows(model: PastaModel) -> list:
    """Rows ``(clusterId, mixedProb, refProb, ratio, isAnomaly)`` for export."""
    mixed, ref = model.mixed_dist.probs, model.ref_dist.probs
    rows = []
    for i in range(model.k):
        r = model.anomaly_set.ratios[i]
        rows.append((i, float(mixed[i]), float(ref[i]), None if np.isnan(r) else float(r),
                     int(i in model.anomaly_set.anomaly_ids)))
    return rows
