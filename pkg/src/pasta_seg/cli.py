"""``pasta`` command line: train, infer, evaluate and sweep from manifests.

Exit codes: 0 success, 1 invalid input or flags, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import baseline as bl
from .clustering import MiniBatchConfig, fit_codebook
from .containers import TRI_CLASS
from .distribution import DEFAULT_GAMMA, DEFAULT_R_THRESHOLD, build_model, histogram_rows
from .errors import MissingFile, PastaError, ValidationError
from .evaluation import (
    ALL_CLASSES,
    ANOMALY_ONLY,
    ConfusionCounts,
    SweepParams,
    accumulate_binary,
    accumulate_confusion,
    iou_report,
    report_csv,
    run_sweep,
    sweep_csv,
    timing_csv,
)
from .segmentation import fuse_masks_report, load_instance_masks, paint_masks, patch_prediction
from .synth import SynthConfig, generate_corpus
from .tensor_io import (
    atomic_write_text,
    load_bag,
    load_codebook,
    load_model,
    read_label_raster,
    read_manifest,
    save_bag,
    save_codebook,
    save_model,
    write_label_raster,
)

log = logging.getLogger("pasta_seg")

DEFAULT_K = 20
DEFAULT_SEEDS = "0,1,2,3,4"
DEFAULT_SWEEP_KS = "10,15,20,25"


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _pair(text: str) -> tuple:
    vals = _int_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated integers, got {text!r}")
    return tuple(vals)


def _threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return max(1, args.threads)
    env = os.environ.get("PASTA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"PASTA_THREADS must be an integer, got {env!r}")
    return 1


def _map(fn, items, threads: int) -> list:
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _emit(text: str, out):
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(out, text)


def _fit_config(args) -> MiniBatchConfig:
    return MiniBatchConfig(batch_size=args.batch_size, max_epochs=args.max_epochs, tol=args.tol,
                           init_sample_size=args.init_sample_size, seed=getattr(args, "seed", 0))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args):
    cfg = SynthConfig(
        dim=args.dim, grid_h=args.grid[0], grid_w=args.grid[1], image_h=args.image[0], image_w=args.image[1],
        n_background=args.n_background, n_target=args.n_target, n_anomaly=args.n_anomaly,
        lam=args.lam, sigma=args.sigma, delta=args.delta, blobs_per_image=args.blobs, blob_size=args.blob_size,
        images_mixed=args.images_mixed, images_reference=args.images_reference, images_test=args.images_test,
        seed=args.seed,
    )
    paths = generate_corpus(cfg, args.out, threads=_threads(args))
    for role, p in paths.items():
        print(f"{role}\t{p}")


def cmd_fit(args):
    mixed = read_manifest(args.mixed)
    grids = _map(lambda r: r.load_grid(), mixed.records, _threads(args))
    x = np.concatenate([g.vectors() for g in grids])
    t0 = time.perf_counter()
    cb = fit_codebook(x, args.k, _fit_config(args))
    log.info("fitted K=%d on %d patches in %.3f s (%d epochs)", args.k, len(x),
             time.perf_counter() - t0, len(cb.inertia_history))
    save_codebook(cb, args.out)


def cmd_define(args):
    cb = load_codebook(args.codebook)
    model = build_model(cb, read_manifest(args.mixed), read_manifest(args.reference),
                        args.r_threshold, args.gamma, threads=_threads(args))
    log.info("anomaly clusters: %s", sorted(model.anomaly_set.anomaly_ids))
    save_model(model, args.out)


def _infer(args, fused: bool):
    model = load_model(args.model)
    manifest = read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    loaded = _map(lambda r: (r, r.load_grid(), load_instance_masks(r) if fused else None),
                  manifest.records, _threads(args))

    def run(item):
        rec, grid, masks = item
        t0 = time.perf_counter()
        if fused:
            raster, verdicts = fuse_masks_report(model, grid, masks, rec.image_h, rec.image_w)
        else:
            raster, verdicts = patch_prediction(model, grid, rec.image_h, rec.image_w), []
        return rec, raster, verdicts, time.perf_counter() - t0

    results = _map(run, loaded, _threads(args))
    rows = ["image,maskId,areaPx,anomalyFraction,label"]
    for rec, raster, verdicts, _ in results:
        write_label_raster(raster, out / f"{rec.stem}.pgm")
        for v in verdicts:
            rows.append(f"{rec.stem},{v.mask_id},{v.area_px},{v.anomaly_fraction:.6f},{v.label}")
    if fused:
        atomic_write_text(out / "fusion_report.csv", "\n".join(rows) + "\n")
    ms = 1000.0 * sum(r[3] for r in results) / len(results)
    path = "fused" if fused else "patch"
    log.info("%s path: %.3f ms per image over %d images", path, ms, len(results))
    if args.timing:
        atomic_write_text(args.timing, f"path,images,msPerImage\n{path},{len(results)},{ms:.6f}\n")


def cmd_infer_patch(args):
    _infer(args, fused=False)


def cmd_infer_fused(args):
    _infer(args, fused=True)


def _manifest_embeddings(manifest, threads: int) -> np.ndarray:
    def pooled(rec):
        return bl.object_embeddings(rec.load_grid(), load_instance_masks(rec))

    parts = _map(pooled, manifest.records, threads)
    dim = manifest.dim
    return np.concatenate([p.reshape(-1, dim) for p in parts])


def cmd_baseline_fit(args):
    cfg = bl.BaselineConfig(k_sphere=args.k_sphere, bag_fraction=args.bag_fraction)
    emb = _manifest_embeddings(read_manifest(args.manifest), _threads(args))
    bag = bl.build_bag(emb, cfg)
    log.info("bag keeps %d of %d object embeddings", len(bag), len(emb))
    save_bag(bag, args.out)


def cmd_baseline_infer(args):
    bag = load_bag(args.bag)
    cfg = bl.BaselineConfig(k_sphere=bag.k_sphere, k_vote=args.k_vote, bag_fraction=bag.bag_fraction)
    manifest = read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def run(rec):
        masks = load_instance_masks(rec)
        return rec, bl.baseline_segment(rec.load_grid(), masks, bag, cfg, rec.image_h, rec.image_w)

    for rec, raster in _map(run, manifest.records, _threads(args)):
        write_label_raster(raster, out / f"{rec.stem}.pgm")


def cmd_baseline_sweep(args):
    threads = _threads(args)
    bag_emb = _manifest_embeddings(read_manifest(args.bag_manifest), threads)
    test = read_manifest(args.manifest)
    items = _map(lambda r: (r, r.load_grid(), load_instance_masks(r), r.load_gt()), test.records, threads)
    objects = [bl.object_embeddings(grid, masks) for _, grid, masks, _ in items]

    lines = ["kSphere,kVote,background,target,anomaly,miou"]
    for k_sphere in args.k_sphere:
        bag = bl.build_bag(bag_emb, bl.BaselineConfig(k_sphere=k_sphere, bag_fraction=args.bag_fraction))
        for k_vote in args.k_vote:
            counts = ConfusionCounts()
            for (rec, _, masks, gt), emb in zip(items, objects):
                if gt is None:
                    continue
                labels = [bl.classify_embedding(bag, e, k_vote) for e in emb]
                pred = paint_masks(rec.image_h, rec.image_w, masks, labels)
                counts = accumulate_confusion(pred, gt, counts)
            rep = iou_report(counts)
            vals = [rep.iou[c] for c in ALL_CLASSES] + [rep.miou]
            lines.append(f"{k_sphere},{k_vote}," + ",".join("" if v is None else f"{v:.6f}" for v in vals))
    _emit("\n".join(lines) + "\n", args.out)


def cmd_eval(args):
    pred_dir = Path(args.pred)
    pairs = []
    if args.manifest:
        for rec in read_manifest(args.manifest):
            if rec.gt_mask_path is not None:
                pairs.append((pred_dir / f"{rec.stem}.pgm", rec.gt_mask_path))
    else:
        gt_dir = Path(args.gt)
        if not gt_dir.is_dir():
            raise MissingFile(f"no such directory: {gt_dir}")
        pairs = [(pred_dir / p.name, p) for p in sorted(gt_dir.glob("*.pgm"))]
    if not pairs:
        raise ValidationError("no ground-truth rasters to evaluate")
    counts = ConfusionCounts()
    accumulate = accumulate_binary if args.mode == "patch" else accumulate_confusion
    for pred_path, gt_path in pairs:
        pred = read_label_raster(pred_path, TRI_CLASS)
        gt = read_label_raster(gt_path, TRI_CLASS)
        counts = accumulate(pred, gt, counts)
    report = iou_report(counts, ANOMALY_ONLY if args.mode == "patch" else ALL_CLASSES)
    _emit(report_csv(report), args.out)


def cmd_sweep(args):
    params = SweepParams(fit=_fit_config(args), r_threshold=args.r_threshold, gamma=args.gamma,
                         threads=_threads(args))
    result = run_sweep(read_manifest(args.mixed), read_manifest(args.reference), read_manifest(args.test),
                       ks=args.k, seeds=args.seeds, mode=args.mode, params=params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "sweep.csv", sweep_csv(result))
    atomic_write_text(out / "timing.csv", timing_csv(result))
    for c in result.cells:
        log.info("K=%d seed=%d setup %.3f s, patch %.3f ms/img, fused %.3f ms/img",
                 c.k, c.seed, c.model_setup_seconds, c.patch_ms_per_image, c.fused_ms_per_image)


def cmd_hist(args):
    model = load_model(args.model)
    lines = ["clusterId,mixedProb,refProb,ratio,isAnomaly"]
    for cid, mixed, ref, ratio, flag in histogram_rows(model):
        lines.append(f"{cid},{mixed:.9f},{ref:.9f},{'' if ratio is None else f'{ratio:.9f}'},{flag}")
    _emit("\n".join(lines) + "\n", args.out)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_fit_flags(p):
    p.add_argument("--batch-size", type=int, default=4096)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--init-sample-size", type=int, default=65536)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    # SUPPRESS keeps a subcommand's defaults from clobbering flags given before it
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads (default: $PASTA_THREADS or 1); never changes results")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="pasta", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--grid", type=_pair, default=(16, 16), help="gridH,gridW")
    p.add_argument("--image", type=_pair, default=(64, 64), help="imageH,imageW")
    p.add_argument("--n-background", type=int, default=2)
    p.add_argument("--n-target", type=int, default=2)
    p.add_argument("--n-anomaly", type=int, default=1)
    p.add_argument("--lam", type=float, default=0.2, help="per-blob anomaly probability")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=None, help="min distance between component means")
    p.add_argument("--blobs", type=_pair, default=(2, 5), help="min,max blobs per image")
    p.add_argument("--blob-size", type=_pair, default=(2, 4), help="min,max blob side in patches")
    p.add_argument("--images-mixed", type=int, default=100)
    p.add_argument("--images-reference", type=int, default=100)
    p.add_argument("--images-test", type=int, default=50)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", parents=[common], help="fit the cluster codebook on the mixed corpus")
    p.add_argument("--mixed", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("define-anomalies", parents=[common], help="contrast corpora and write a model")
    p.add_argument("--codebook", required=True)
    p.add_argument("--mixed", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--r-threshold", type=float, default=DEFAULT_R_THRESHOLD)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_define)

    for name, func, helptext in (("infer-patch", cmd_infer_patch, "patch-level anomaly masks"),
                                 ("infer-fused", cmd_infer_fused, "tri-class masks via instance-mask fusion")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--model", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--timing", default=None, help="optional CSV for per-image latency")
        p.set_defaults(func=func)

    p = sub.add_parser("baseline", parents=[common], help="hypersphere feature-bag baseline")
    bsub = p.add_subparsers(dest="baseline_command", metavar="action", parser_class=_Parser)
    bsub.required = True
    q = bsub.add_parser("fit", parents=[common])
    q.add_argument("--manifest", required=True, help="corpus whose objects form the bag")
    q.add_argument("--k-sphere", type=int, default=10)
    q.add_argument("--bag-fraction", type=float, default=bl.DEFAULT_BAG_FRACTION)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_baseline_fit)
    q = bsub.add_parser("infer", parents=[common])
    q.add_argument("--bag", required=True)
    q.add_argument("--manifest", required=True)
    q.add_argument("--k-vote", type=int, default=1)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_baseline_infer)
    q = bsub.add_parser("sweep", parents=[common])
    q.add_argument("--bag-manifest", required=True)
    q.add_argument("--manifest", required=True, help="test corpus with ground truth")
    q.add_argument("--k-sphere", type=_int_list, required=True)
    q.add_argument("--k-vote", type=_int_list, required=True)
    q.add_argument("--bag-fraction", type=float, default=bl.DEFAULT_BAG_FRACTION)
    q.add_argument("--out", default=None)
    q.set_defaults(func=cmd_baseline_sweep)

    p = sub.add_parser("eval", parents=[common], help="IoU of predicted against ground-truth rasters")
    p.add_argument("--pred", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--gt", help="directory of ground-truth rasters with the same file names")
    src.add_argument("--manifest", help="manifest whose gt rasters pair with <pred>/<stem>.pgm")
    p.add_argument("--mode", choices=("fused", "patch"), default="fused")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="IoU over K x seeds")
    p.add_argument("--mixed", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--k", type=_int_list, default=_int_list(DEFAULT_SWEEP_KS))
    p.add_argument("--seeds", type=_int_list, default=_int_list(DEFAULT_SEEDS))
    p.add_argument("--mode", choices=("fused", "patch"), default="fused")
    p.add_argument("--r-threshold", type=float, default=DEFAULT_R_THRESHOLD)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--out", required=True)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("hist", parents=[common], help="per-cluster distributions of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_hist)
    return parser


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except MissingFile as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PastaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
