"""Hypersphere feature-bag baseline.

Object embeddings are pooled from patch features under each instance mask.
Every embedding gets a radius equal to the distance to its ``k_sphere``-th
nearest neighbour; the densest ``bag_fraction`` of them form the nominal bag.
A query is nominal (target) when a majority of its ``k_vote`` nearest bag
entries contain it within their radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .containers import ANOMALY, TARGET, TRI_CLASS, FeatureGrid, LabelRaster
from .errors import BagTooSmall, DimMismatch, EmptyMask, InvalidConfig, TooFewSamples
from .segmentation import InstanceMaskSet, paint_masks, upsample_nearest

DEFAULT_BAG_FRACTION = 0.9


@dataclass
class BaselineConfig:
    k_sphere: int = 10
    k_vote: int = 1
    bag_fraction: float = DEFAULT_BAG_FRACTION

    def __post_init__(self):
        if self.k_sphere < 1:
            raise InvalidConfig("k_sphere must be >= 1")
        if self.k_vote < 1:
            raise InvalidConfig("k_vote must be >= 1")
        if not 0.0 < self.bag_fraction <= 1.0:
            raise InvalidConfig("bag_fraction must lie in (0, 1]")


@dataclass(eq=False)
class FeatureBag:
    embeddings: np.ndarray
    radii: np.ndarray
    k_sphere: int
    bag_fraction: float = DEFAULT_BAG_FRACTION

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.radii.shape != (self.embeddings.shape[0],):
            raise DimMismatch("bag needs (n, dim) embeddings and n radii")
        if (self.radii < 0).any():
            raise InvalidConfig("radii must be >= 0")

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureBag):
            return NotImplemented
        return (self.embeddings.tobytes() == other.embeddings.tobytes()
                and self.embeddings.shape == other.embeddings.shape
                and self.radii.tobytes() == other.radii.tobytes()
                and self.k_sphere == other.k_sphere and self.bag_fraction == other.bag_fraction)


def _distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def pool_object_embedding(grid: FeatureGrid, mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Mean patch vector under ``mask``, each patch weighted by its covered pixel count."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (height, width):
        raise DimMismatch(f"mask is {mask.shape}, expected {(height, width)}")
    if not mask.any():
        raise EmptyMask("cannot pool an empty mask")
    patch_ids = upsample_nearest(np.arange(grid.grid_h * grid.grid_w).reshape(grid.grid_h, grid.grid_w),
                                 height, width)
    weights = np.bincount(patch_ids[mask], minlength=grid.grid_h * grid.grid_w).astype(np.float64)
    return weights @ grid.vectors().astype(np.float64) / weights.sum()


def knn_radii(embeddings: np.ndarray, k_sphere: int, chunk: int = 512) -> np.ndarray:
    """Distance from each row to its ``k_sphere``-th nearest other row."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if n <= k_sphere:
        raise TooFewSamples(f"need more than k_sphere={k_sphere} embeddings, got {n}")
    out = np.empty(n)
    for start in range(0, n, chunk):
        d = _distances(x[start:start + chunk], x)
        rows = np.arange(d.shape[0])
        d[rows, start + rows] = np.inf
        out[start:start + chunk] = np.partition(d, k_sphere - 1, axis=1)[:, k_sphere - 1]
    return out


def build_bag(embeddings, cfg: BaselineConfig) -> FeatureBag:
    """Keep the ``bag_fraction`` of embeddings with the smallest radii.

    Entries are ordered by radius, ties by input position.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise DimMismatch("embeddings must be (n, dim)")
    radii = knn_radii(x, cfg.k_sphere)
    n_keep = max(1, math.ceil(cfg.bag_fraction * len(x) - 1e-9))
    order = np.lexsort((np.arange(len(x)), radii))[:n_keep]
    return FeatureBag(x[order], radii[order], cfg.k_sphere, cfg.bag_fraction)


def classify_embedding(bag: FeatureBag, query, k_vote: int) -> int:
    """Return ``TARGET`` (1) or ``ANOMALY`` (2) by majority containment vote."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (bag.dim,):
        raise DimMismatch(f"query must have dim {bag.dim}")
    if k_vote < 1 or len(bag) < k_vote:
        raise BagTooSmall(f"bag of {len(bag)} entries cannot supply k_vote={k_vote} neighbours")
    dist = _distances(q[None, :], bag.embeddings)[0]
    nearest = np.lexsort((np.arange(len(bag)), dist))[:k_vote]
    votes = int((dist[nearest] <= bag.radii[nearest]).sum())
    return TARGET if votes >= math.ceil(k_vote / 2) else ANOMALY


def object_embeddings(grid: FeatureGrid, masks: InstanceMaskSet) -> np.ndarray:
    if len(masks) == 0:
        return np.zeros((0, grid.dim))
    return np.stack([pool_object_embedding(grid, m, masks.height, masks.width) for m in masks.masks])


def baseline_segment(grid: FeatureGrid, masks: InstanceMaskSet, bag: FeatureBag, cfg: BaselineConfig,
                     height: int, width: int) -> LabelRaster:
    if (masks.height, masks.width) != (height, width):
        raise DimMismatch(f"masks are {masks.height}x{masks.width}, image is {height}x{width}")
    labels = [classify_embedding(bag, e, cfg.k_vote) for e in object_embeddings(grid, masks)]
    return LabelRaster(paint_masks(height, width, masks, labels), TRI_CLASS)
