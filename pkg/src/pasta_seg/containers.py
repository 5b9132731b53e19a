"""In-memory containers shared by every stage of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, NonFinite, ValueOutOfRange

TRI_CLASS = "tri-class"
INSTANCE = "instance"

BACKGROUND, TARGET, ANOMALY = 0, 1, 2


@dataclass(eq=False)
class FeatureGrid:
    """Patch embeddings of one image, shape ``(grid_h, grid_w, dim)``, float32."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 1:
            raise DimMismatch(f"feature grid must be (gridH, gridW, dim) with all >= 1, got {values.shape}")
        if not np.isfinite(values).all():
            raise NonFinite("feature grid contains NaN or Inf")
        self.values = values

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def vectors(self) -> np.ndarray:
        """Patch vectors flattened row-major to ``(grid_h * grid_w, dim)``."""
        return self.values.reshape(-1, self.dim)

    def __eq__(self, other):
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return self.values.shape == other.values.shape and self.values.tobytes() == other.values.tobytes()


@dataclass(eq=False)
class LabelRaster:
    """One unsigned label per pixel, shape ``(height, width)``."""

    values: np.ndarray
    semantics: str = TRI_CLASS

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or min(values.shape) < 1:
            raise DimMismatch(f"raster must be 2-D with H, W >= 1, got {values.shape}")
        if values.size and (values.min() < 0 or values.max() > 65535):
            raise ValueOutOfRange("raster values must fit in 16 unsigned bits")
        if self.semantics not in (TRI_CLASS, INSTANCE):
            raise ValueError(f"unknown raster semantics {self.semantics!r}")
        self.values = values.astype(np.uint16 if values.max() > 255 else np.uint8)
        if self.semantics == TRI_CLASS:
            self.validate_tri_class()

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def validate_tri_class(self):
        if self.values.max() > ANOMALY:
            bad = sorted(set(np.unique(self.values).tolist()) - {0, 1, 2})
            raise ValueOutOfRange(f"tri-class raster contains values {bad}")

    def __eq__(self, other):
        if not isinstance(other, LabelRaster):
            return NotImplemented
        return self.semantics == other.semantics and np.array_equal(self.values, other.values)
