"""Patch-level anomaly maps and instance-mask fusion into tri-class masks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .clustering import assign_grid
from .containers import ANOMALY, BACKGROUND, INSTANCE, TARGET, TRI_CLASS, FeatureGrid, LabelRaster
from .errors import BadDims, DimMismatch, EmptyMask

log = logging.getLogger(__name__)


@dataclass
class InstanceMaskSet:
    """Binary instance masks of one image, all ``(height, width)``.

    Empty masks are dropped (with a warning) on construction; ``ids`` keeps
    the label each surviving mask had in its source raster.
    """

    height: int
    width: int
    masks: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = list(range(1, len(self.masks) + 1))
        if len(self.ids) != len(self.masks):
            raise DimMismatch("one id per mask required")
        kept_masks, kept_ids = [], []
        for mid, m in zip(self.ids, self.masks):
            m = np.asarray(m, dtype=bool)
            if m.shape != (self.height, self.width):
                raise DimMismatch(f"mask {mid} is {m.shape}, expected {(self.height, self.width)}")
            if not m.any():
                log.warning("dropping empty instance mask %s", mid)
                continue
            kept_masks.append(m)
            kept_ids.append(int(mid))
        self.masks, self.ids = kept_masks, kept_ids

    def __len__(self):
        return len(self.masks)

    @classmethod
    def from_raster(cls, raster: LabelRaster) -> InstanceMaskSet:
        """One mask per non-zero instance id, in increasing id order."""
        values = raster.values
        ids = [int(i) for i in np.unique(values) if i != 0]
        return cls(raster.height, raster.width, [values == i for i in ids], ids)


@dataclass
class MaskVerdict:
    mask_id: int
    area_px: int
    anomaly_fraction: float
    label: int


def _anomaly_lookup(anomaly_set, k=None) -> np.ndarray:
    ids = getattr(anomaly_set, "anomaly_ids", anomaly_set)
    ids = sorted(int(i) for i in ids)
    size = max(k or 0, (ids[-1] + 1) if ids else 0, 1)
    table = np.zeros(size, dtype=bool)
    table[ids] = True
    return table


def infer_patch_anomaly(model, grid: FeatureGrid) -> np.ndarray:
    """1 where a patch falls in an anomaly cluster, else 0; shape ``(grid_h, grid_w)``."""
    labels = assign_grid(model.codebook, grid)
    return _anomaly_lookup(model.anomaly_set, model.k)[labels].astype(np.uint8)


def upsample_nearest(cells: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pixel ``(y, x)`` copies cell ``(y * gh // H, x * gw // W)``."""
    cells = np.asarray(cells)
    if cells.ndim != 2:
        raise BadDims("expected a 2-D cell map")
    gh, gw = cells.shape
    if height < gh or width < gw or gh < 1 or gw < 1:
        raise BadDims(f"cannot upsample {gh}x{gw} to {height}x{width}")
    rows = (np.arange(height) * gh) // height
    cols = (np.arange(width) * gw) // width
    return cells[rows[:, None], cols[None, :]]


def patch_prediction(model, grid: FeatureGrid, height: int, width: int) -> LabelRaster:
    """Evaluation-A output: anomaly patches painted 2 at image resolution, the rest 0."""
    binary = infer_patch_anomaly(model, grid)
    return LabelRaster(upsample_nearest(binary, height, width) * ANOMALY, TRI_CLASS)


def anomaly_fraction(mask: np.ndarray, cluster_raster: np.ndarray, anomaly_set) -> float:
    """Share of the mask's foreground pixels lying over anomaly clusters."""
    mask = np.asarray(mask, dtype=bool)
    cluster_raster = np.asarray(cluster_raster)
    if mask.shape != cluster_raster.shape:
        raise DimMismatch(f"mask {mask.shape} vs cluster raster {cluster_raster.shape}")
    area = int(mask.sum())
    if area == 0:
        raise EmptyMask("mask has no foreground pixels")
    under = cluster_raster[mask]
    table = _anomaly_lookup(anomaly_set, int(under.max()) + 1)
    return int(table[under].sum()) / area


def paint_masks(height: int, width: int, masks: InstanceMaskSet, labels) -> np.ndarray:
    out = np.full((height, width), BACKGROUND, dtype=np.uint8)
    # anomaly beats target beats background where masks overlap
    for m, lab in zip(masks.masks, labels):
        np.maximum(out, np.where(m, lab, BACKGROUND).astype(np.uint8), out=out)
    return out


def fuse_masks_report(model, grid: FeatureGrid, masks: InstanceMaskSet, height: int, width: int):
    """Like :func:`fuse_masks` but also returns one :class:`MaskVerdict` per mask."""
    if (masks.height, masks.width) != (height, width):
        raise DimMismatch(f"masks are {masks.height}x{masks.width}, image is {height}x{width}")
    if grid.dim != model.dim:
        raise DimMismatch(f"grid dim {grid.dim} != model dim {model.dim}")
    cluster_raster = upsample_nearest(assign_grid(model.codebook, grid), height, width)
    verdicts = []
    for mid, m in zip(masks.ids, masks.masks):
        frac = anomaly_fraction(m, cluster_raster, model.anomaly_set)
        label = ANOMALY if frac > model.gamma else TARGET
        verdicts.append(MaskVerdict(mid, int(m.sum()), frac, label))
    raster = LabelRaster(paint_masks(height, width, masks, [v.label for v in verdicts]), TRI_CLASS)
    return raster, verdicts


def fuse_masks(model, grid: FeatureGrid, masks: InstanceMaskSet, height: int, width: int) -> LabelRaster:
    """Label each instance mask anomaly when its anomaly-cluster share exceeds gamma.

    Pixels under no mask stay background.
    """
    return fuse_masks_report(model, grid, masks, height, width)[0]


def load_instance_masks(record) -> InstanceMaskSet:
    """Instance masks of a manifest record; an absent raster means no masks."""
    raster = record.load_instances()
    if raster is None:
        return InstanceMaskSet(record.image_h, record.image_w)
    if raster.semantics != INSTANCE:
        raster = LabelRaster(raster.values, INSTANCE)
    return InstanceMaskSet.from_raster(raster)
