"""Seeded synthetic corpora with planted background / target / anomaly components.

Each image is a patch grid. Background patches draw from background
components; rectangular, patch-aligned, non-overlapping blobs are targets or,
with probability ``lam`` per blob, anomalies. Patch vectors are the component
mean plus isotropic Gaussian noise.

Random streams: component means come from ``SeedSequence([seed, 1000])``;
image ``i`` of role ``r`` (0 mixed, 1 reference, 2 test) from
``SeedSequence([seed, r, i])``, consumed as placement first, then noise.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .containers import ANOMALY, INSTANCE, TARGET, TRI_CLASS, FeatureGrid, LabelRaster
from .errors import InvalidConfig, PlacementFailure
from .segmentation import upsample_nearest
from .tensor_io import ImageRecord, atomic_write_text, write_feature_grid, write_label_raster, write_manifest

ROLE_INDEX = {"mixed": 0, "reference": 1, "test": 2}
_MEANS_STREAM = 1000
_MEAN_RETRIES = 1000
_MEAN_RESTARTS = 100
_BLOB_RETRIES = 200


@dataclass
class SynthConfig:
    dim: int = 64
    grid_h: int = 16
    grid_w: int = 16
    image_h: int = 64
    image_w: int = 64
    n_background: int = 2
    n_target: int = 2
    n_anomaly: int = 1
    lam: float = 0.2
    sigma: float = 1.0
    delta: float | None = None  # None: 10 * sigma * sqrt(dim)
    blobs_per_image: tuple = (2, 5)
    blob_size: tuple = (2, 4)
    images_mixed: int = 100
    images_reference: int = 100
    images_test: int = 50
    seed: int = 0

    @property
    def min_separation(self) -> float:
        return self.delta if self.delta is not None else 10.0 * self.sigma * math.sqrt(self.dim)

    @property
    def n_components(self) -> int:
        return self.n_background + self.n_target + self.n_anomaly

    def kinds(self) -> list:
        return ["background"] * self.n_background + ["target"] * self.n_target + ["anomaly"] * self.n_anomaly

    def validate(self):
        if self.min_separation <= 0:
            raise InvalidConfig("delta must be > 0")
        if self.sigma < 0:
            raise InvalidConfig("sigma must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidConfig("lam must lie in [0, 1]")
        if self.dim < 2:
            raise InvalidConfig("dim must be >= 2")
        if self.image_h < self.grid_h or self.image_w < self.grid_w or min(self.grid_h, self.grid_w) < 1:
            raise InvalidConfig("image must be at least as large as the patch grid")
        if self.n_background < 1 or self.n_target < 1 or self.n_anomaly < 0:
            raise InvalidConfig("need >= 1 background and target component")
        if self.lam > 0 and self.n_anomaly < 1:
            raise InvalidConfig("lam > 0 requires an anomaly component")
        lo, hi = self.blobs_per_image
        slo, shi = self.blob_size
        if not 0 <= lo <= hi or not 1 <= slo <= shi or shi > min(self.grid_h, self.grid_w):
            raise InvalidConfig("bad blob count or size range")


@dataclass
class SceneTruth:
    tri_class_gt: LabelRaster
    instance_gt: LabelRaster
    patch_component: np.ndarray
    patch_class: np.ndarray


def generate_component_means(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Means on a sphere, rejection-sampled until every pair is >= delta apart."""
    cfg.validate()
    n, delta = cfg.n_components, cfg.min_separation
    radius = delta * max(1.0, n / 2)
    for _ in range(_MEAN_RESTARTS):
        means = []
        for _ in range(n):
            for _ in range(_MEAN_RETRIES):
                u = rng.standard_normal(cfg.dim)
                cand = radius * u / np.linalg.norm(u)
                if all(np.linalg.norm(cand - m) >= delta for m in means):
                    means.append(cand)
                    break
            else:
                break
        if len(means) == n:
            return np.stack(means)
    raise PlacementFailure(f"could not place {n} means {delta} apart in {cfg.dim} dims")


def _place_blobs(cfg: SynthConfig, rng: np.random.Generator, allow_anomalies: bool):
    gh, gw = cfg.grid_h, cfg.grid_w
    component = rng.integers(cfg.n_background, size=(gh, gw))
    klass = np.zeros((gh, gw), dtype=np.uint8)
    instance = np.zeros((gh, gw), dtype=np.int64)
    n_blobs = int(rng.integers(cfg.blobs_per_image[0], cfg.blobs_per_image[1] + 1))
    lo, hi = cfg.blob_size
    for b in range(1, n_blobs + 1):
        h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        for _ in range(_BLOB_RETRIES):
            y = int(rng.integers(0, gh - h + 1))
            x = int(rng.integers(0, gw - w + 1))
            if not instance[y:y + h, x:x + w].any():
                break
        else:
            raise PlacementFailure(f"could not place blob {b} of {h}x{w} patches")
        anomalous = allow_anomalies and rng.random() < cfg.lam
        if anomalous:
            comp = cfg.n_background + cfg.n_target + int(rng.integers(cfg.n_anomaly))
        else:
            comp = cfg.n_background + int(rng.integers(cfg.n_target))
        instance[y:y + h, x:x + w] = b
        klass[y:y + h, x:x + w] = ANOMALY if anomalous else TARGET
        component[y:y + h, x:x + w] = comp
    return component, klass, instance


def generate_scene(cfg: SynthConfig, means: np.ndarray, rng: np.random.Generator, allow_anomalies: bool = True):
    """One image: ``(FeatureGrid, SceneTruth)``."""
    component, klass, instance = _place_blobs(cfg, rng, allow_anomalies)
    noise = rng.standard_normal((cfg.grid_h, cfg.grid_w, cfg.dim))
    features = means[component] + cfg.sigma * noise
    truth = SceneTruth(
        tri_class_gt=LabelRaster(upsample_nearest(klass, cfg.image_h, cfg.image_w), TRI_CLASS),
        instance_gt=LabelRaster(upsample_nearest(instance, cfg.image_h, cfg.image_w), INSTANCE),
        patch_component=component,
        patch_class=klass,
    )
    return FeatureGrid(features.astype(np.float32)), truth


def means_rng(cfg: SynthConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, _MEANS_STREAM]))


def image_rng(cfg: SynthConfig, role: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, ROLE_INDEX[role], index]))


def role_size(cfg: SynthConfig, role: str) -> int:
    return {"mixed": cfg.images_mixed, "reference": cfg.images_reference, "test": cfg.images_test}[role]


def iter_scenes(cfg: SynthConfig, role: str, means: np.ndarray | None = None):
    """Yield the scenes of one role in memory, identical to what :func:`generate_corpus` writes."""
    cfg.validate()
    means = generate_component_means(cfg, means_rng(cfg)) if means is None else means
    for i in range(role_size(cfg, role)):
        yield generate_scene(cfg, means, image_rng(cfg, role, i), allow_anomalies=role != "reference")


def generate_corpus(cfg: SynthConfig, out_dir, threads: int = 1) -> dict:
    """Write mixed / reference / test corpora and their manifests under ``out_dir``.

    Returns ``{role: manifest path}``.
    """
    cfg.validate()
    out = Path(out_dir)
    means = generate_component_means(cfg, means_rng(cfg))
    manifests = {}
    for role in ROLE_INDEX:
        sub = out / role
        sub.mkdir(parents=True, exist_ok=True)

        def make(i, role=role, sub=sub):
            grid, truth = generate_scene(cfg, means, image_rng(cfg, role, i), allow_anomalies=role != "reference")
            stem = f"img_{i:05d}"
            rec = ImageRecord(sub / f"{stem}.pfv", cfg.image_h, cfg.image_w,
                              sub / f"{stem}_inst.pgm", sub / f"{stem}_gt.pgm")
            write_feature_grid(grid, rec.feature_path)
            write_label_raster(truth.instance_gt, rec.instance_mask_path)
            write_label_raster(truth.tri_class_gt, rec.gt_mask_path)
            return rec

        n = role_size(cfg, role)
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                records = list(pool.map(make, range(n)))
        else:
            records = [make(i) for i in range(n)]
        manifests[role] = out / f"{role}.tsv"
        write_manifest(manifests[role], role, records)

    lines = ["componentId,kind,meanNorm"]
    for i, (kind, m) in enumerate(zip(cfg.kinds(), means)):
        lines.append(f"{i},{kind},{np.linalg.norm(m):.6f}")
    atomic_write_text(out / "truth.csv", "\n".join(lines) + "\n")
    return manifests


def patch_values(raster: LabelRaster, grid_h: int, grid_w: int) -> np.ndarray:
    """Read a patch-aligned raster back at grid resolution (first pixel of each patch)."""
    h, w = raster.height, raster.width
    rows = -((-np.arange(grid_h) * h) // grid_h)
    cols = -((-np.arange(grid_w) * w) // grid_w)
    return raster.values[rows[:, None], cols[None, :]]
