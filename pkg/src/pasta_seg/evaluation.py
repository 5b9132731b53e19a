"""Pixel IoU over tri-class masks, seed aggregation and K x seed sweeps."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .clustering import MiniBatchConfig, fit_codebook
from .containers import ANOMALY, BACKGROUND, LabelRaster
from .distribution import DEFAULT_GAMMA, DEFAULT_R_THRESHOLD, build_model
from .errors import AllClassesUndefined, DimMismatch, EmptyInput, InvalidConfig
from .segmentation import fuse_masks, load_instance_masks, patch_prediction

CLASS_NAMES = ("background", "target", "anomaly")
ALL_CLASSES = (0, 1, 2)
ANOMALY_ONLY = (ANOMALY,)
MODES = ("patch", "fused")


@dataclass
class ConfusionCounts:
    """Dataset-wide per-class TP / FP / FN pixel counts."""

    tp: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    fp: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    fn: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class IoUReport:
    """IoU in percent per class (``None`` when the class never occurs) and mIoU."""

    iou: dict
    miou: float

    def rows(self):
        for c, v in self.iou.items():
            yield CLASS_NAMES[c], v
        yield "miou", self.miou


@dataclass
class SeedAggregate:
    mean: float
    std: float
    n: int
    values: list


def _values(mask) -> np.ndarray:
    return mask.values if isinstance(mask, LabelRaster) else np.asarray(mask)


def accumulate_confusion(pred, gt, counts: ConfusionCounts | None = None) -> ConfusionCounts:
    p, g = _values(pred), _values(gt)
    if p.shape != g.shape:
        raise DimMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    counts = counts or ConfusionCounts()
    cm = np.bincount(g.astype(np.int64).ravel() * 3 + p.astype(np.int64).ravel(), minlength=9).reshape(3, 3)
    diag = np.diag(cm)
    return ConfusionCounts(counts.tp + diag, counts.fp + cm.sum(axis=0) - diag, counts.fn + cm.sum(axis=1) - diag)


def iou_report(counts: ConfusionCounts, classes=ALL_CLASSES) -> IoUReport:
    """``100 * TP / (TP + FP + FN)`` per class; classes with an empty union are left out of mIoU."""
    iou = {}
    for c in classes:
        denom = int(counts.tp[c] + counts.fp[c] + counts.fn[c])
        iou[c] = None if denom == 0 else 100.0 * int(counts.tp[c]) / denom
    defined = [v for v in iou.values() if v is not None]
    if not defined:
        raise AllClassesUndefined("no class has a non-empty union")
    return IoUReport(iou=iou, miou=sum(defined) / len(defined))


def merge_nominal(mask) -> np.ndarray:
    """Collapse background and target into one nominal class (0), keep anomaly (2)."""
    v = _values(mask)
    return np.where(v == ANOMALY, ANOMALY, BACKGROUND).astype(np.uint8)


def accumulate_binary(pred, gt, counts: ConfusionCounts | None = None) -> ConfusionCounts:
    """Evaluation-A accumulation: only anomaly vs. everything else is scored."""
    return accumulate_confusion(merge_nominal(pred), merge_nominal(gt), counts)


def aggregate_seeds(values) -> SeedAggregate:
    vals = [float(v) for v in values]
    if not vals:
        raise EmptyInput("no values to aggregate")
    arr = np.asarray(vals)
    std = float(arr.std(ddof=1)) if len(vals) > 1 else 0.0
    return SeedAggregate(mean=float(arr.mean()), std=std, n=len(vals), values=vals)


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

@dataclass
class LoadedCorpus:
    """Grids, instance masks and ground truth held in memory for repeated scoring."""

    records: list
    grids: list
    masks: list
    gts: list

    @classmethod
    def load(cls, manifest, with_masks=True, with_gt=True) -> LoadedCorpus:
        recs = list(manifest.records)
        return cls(
            records=recs,
            grids=[r.load_grid() for r in recs],
            masks=[load_instance_masks(r) for r in recs] if with_masks else [None] * len(recs),
            gts=[r.load_gt() for r in recs] if with_gt else [None] * len(recs),
        )


@dataclass
class SweepParams:
    fit: MiniBatchConfig = field(default_factory=MiniBatchConfig)
    r_threshold: float = DEFAULT_R_THRESHOLD
    gamma: float = DEFAULT_GAMMA
    threads: int = 1


@dataclass
class CellResult:
    k: int
    seed: int
    report: IoUReport
    model_setup_seconds: float
    patch_ms_per_image: float
    fused_ms_per_image: float
    model: object = None


@dataclass
class SweepResult:
    mode: str
    cells: list
    aggregates: dict  # (K, class name) -> SeedAggregate


def predict_corpus(model, corpus: LoadedCorpus, mode: str) -> tuple:
    """Predictions for every image and the mean milliseconds spent per image."""
    preds = []
    start = time.perf_counter()
    for rec, grid, masks in zip(corpus.records, corpus.grids, corpus.masks):
        if mode == "patch":
            preds.append(patch_prediction(model, grid, rec.image_h, rec.image_w))
        else:
            preds.append(fuse_masks(model, grid, masks, rec.image_h, rec.image_w))
    ms = 1000.0 * (time.perf_counter() - start) / max(1, len(preds))
    return preds, ms


def score(preds, gts, mode: str) -> IoUReport:
    counts = ConfusionCounts()
    for pred, gt in zip(preds, gts):
        if gt is None:
            continue
        counts = accumulate_binary(pred, gt, counts) if mode == "patch" else accumulate_confusion(pred, gt, counts)
    return iou_report(counts, ANOMALY_ONLY if mode == "patch" else ALL_CLASSES)


class _Stacked:
    """Mixed corpus vectors as one matrix plus the per-image grids they came from."""

    def __init__(self, grids):
        self.grids = list(grids)
        self.matrix = np.concatenate([g.vectors() for g in self.grids]).astype(np.float64)


def run_cell(mixed: _Stacked, reference_grids, test: LoadedCorpus, k: int, seed: int, mode: str,
             params: SweepParams) -> CellResult:
    """Fit, define anomalies and score one ``(K, seed)`` configuration."""
    t0 = time.perf_counter()
    cb = fit_codebook(mixed.matrix, k, replace(params.fit, seed=seed))
    model = build_model(cb, mixed.grids, reference_grids, params.r_threshold, params.gamma)
    setup = time.perf_counter() - t0
    patch_preds, patch_ms = predict_corpus(model, test, "patch")
    fused_preds, fused_ms = predict_corpus(model, test, "fused")
    report = score(patch_preds if mode == "patch" else fused_preds, test.gts, mode)
    return CellResult(k, seed, report, setup, patch_ms, fused_ms, model)


def run_sweep(mixed, reference, test, ks=(10, 15, 20, 25), seeds=(0, 1, 2, 3, 4), mode: str = "fused",
              params: SweepParams | None = None) -> SweepResult:
    """Every ``(K, seed)`` cell is fitted independently; aggregates are taken over seeds.

    ``mixed``/``reference``/``test`` are manifests or :class:`LoadedCorpus` objects.
    """
    if mode not in MODES:
        raise InvalidConfig(f"mode must be one of {MODES}")
    params = params or SweepParams()
    mixed_c = mixed if isinstance(mixed, LoadedCorpus) else LoadedCorpus.load(mixed, False, False)
    ref_c = reference if isinstance(reference, LoadedCorpus) else LoadedCorpus.load(reference, False, False)
    test_c = test if isinstance(test, LoadedCorpus) else LoadedCorpus.load(test)
    stacked = _Stacked(mixed_c.grids)

    def job(cell):
        return run_cell(stacked, ref_c.grids, test_c, cell[0], cell[1], mode, params)

    cells = [(int(k), int(s)) for k in ks for s in seeds]
    if params.threads > 1:
        with ThreadPoolExecutor(params.threads) as pool:
            results = list(pool.map(job, cells))
    else:
        results = [job(c) for c in cells]

    aggregates = {}
    for k in dict.fromkeys(int(k) for k in ks):
        per_k = [r for r in results if r.k == k]
        for name, _ in per_k[0].report.rows():
            vals = [dict(r.report.rows())[name] for r in per_k]
            vals = [v for v in vals if v is not None]
            if vals:
                aggregates[(k, name)] = aggregate_seeds(vals)
    return SweepResult(mode=mode, cells=results, aggregates=aggregates)


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


SWEEP_HEADER = "row,K,seed,class,iou,mean,std,n"
TIMING_HEADER = "K,seed,modelSetupSeconds,patchMsPerImage,fusedMsPerImage"


def sweep_csv(result: SweepResult) -> str:
    lines = [SWEEP_HEADER]
    for cell in result.cells:
        for name, v in cell.report.rows():
            lines.append(f"cell,{cell.k},{cell.seed},{name},{_fmt(v)},,,")
    for (k, name), agg in result.aggregates.items():
        lines.append(f"aggregate,{k},,{name},,{_fmt(agg.mean)},{_fmt(agg.std)},{agg.n}")
    return "\n".join(lines) + "\n"


def timing_csv(result: SweepResult) -> str:
    lines = [TIMING_HEADER]
    for c in result.cells:
        lines.append(f"{c.k},{c.seed},{c.model_setup_seconds:.6f},{c.patch_ms_per_image:.6f},{c.fused_ms_per_image:.6f}")
    return "\n".join(lines) + "\n"


def report_csv(report: IoUReport) -> str:
    lines = ["class,iou"]
    lines += [f"{name},{_fmt(v)}" for name, v in report.rows()]
    return "\n".join(lines) + "\n"
