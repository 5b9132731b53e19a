"""End-to-end acceptance checks, one ``criterion`` marker per requirement.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import csv
import io
import time
from fractions import Fraction

import numpy as np
import pytest

from oracles import confusion_triple_loop, lloyd, mean_inertia, upsample_formula
from pasta_seg.baseline import (
    BaselineConfig,
    FeatureBag,
    baseline_segment,
    build_bag,
    classify_embedding,
    knn_radii,
    object_embeddings,
)
from pasta_seg.cli import dispatch
from pasta_seg.clustering import MiniBatchConfig, assign_many, fit_codebook, inertia, init_centroids
from pasta_seg.containers import ANOMALY, INSTANCE, TARGET, FeatureGrid, LabelRaster
from pasta_seg.distribution import ClusterDistribution, build_model, compute_ratios, define_anomaly_set
from pasta_seg.evaluation import LoadedCorpus, accumulate_confusion, aggregate_seeds, iou_report, predict_corpus, score
from pasta_seg.segmentation import InstanceMaskSet, anomaly_fraction, fuse_masks_report, upsample_nearest
from pasta_seg.synth import SynthConfig, generate_corpus, iter_scenes
from pasta_seg.tensor_io import read_manifest
from test_cli import SYNTH, pipeline, tree
from test_segmentation import CENTS, make_model

crit = pytest.mark.criterion


# --------------------------------------------------------------------------
# 1. synthetic end-to-end recovery
# --------------------------------------------------------------------------

@crit("AC1", "synthetic end-to-end recovery, default preset, K=5, 5 seeds, <= 60 s")
def test_ac1_end_to_end_recovery(tmp_path, note):
    start = time.perf_counter()
    cfg = SynthConfig()
    paths = generate_corpus(cfg, tmp_path)
    mixed = LoadedCorpus.load(read_manifest(paths["mixed"]), False, False)
    ref = LoadedCorpus.load(read_manifest(paths["reference"]), False, False)
    test = LoadedCorpus.load(read_manifest(paths["test"]))
    components = np.concatenate([t.patch_component.ravel() for _, t in iter_scenes(cfg, "mixed")])
    anomaly_component = cfg.n_components - 1
    x = np.concatenate([g.vectors() for g in mixed.grids]).astype(np.float64)

    eval_a, eval_b_anom, eval_b_target, sets_ok = [], [], [], []
    for seed in range(5):
        cb = fit_codebook(x, 5, MiniBatchConfig(seed=seed))
        model = build_model(cb, mixed.grids, ref.grids)
        labels = assign_many(cb, x)
        dominated = set()
        for c in range(cb.k):
            members = components[labels == c]
            if len(members) and np.bincount(members).argmax() == anomaly_component:
                dominated.add(c)
        sets_ok.append(set(model.anomaly_set.anomaly_ids) == dominated and dominated)
        patch, _ = predict_corpus(model, test, "patch")
        fused, _ = predict_corpus(model, test, "fused")
        eval_a.append(score(patch, test.gts, "patch").iou[ANOMALY])
        rep_b = score(fused, test.gts, "fused")
        eval_b_anom.append(rep_b.iou[ANOMALY])
        eval_b_target.append(rep_b.iou[TARGET])
    elapsed = time.perf_counter() - start

    aggs = {name: aggregate_seeds(v) for name, v in
            (("A anomaly", eval_a), ("B anomaly", eval_b_anom), ("B target", eval_b_target))}
    for name, agg in aggs.items():
        note(f"{name} {agg.mean:.2f}+-{agg.std:.2f}")
    note(f"{elapsed:.1f} s")
    assert all(sets_ok)
    for agg in aggs.values():
        assert agg.mean >= 99.0 and agg.std <= 1.0
    assert elapsed <= 60.0


# --------------------------------------------------------------------------
# 2. clustering oracle equivalence
# --------------------------------------------------------------------------

def _instances():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        n = int(rng.integers(8, 257))
        d = int(rng.integers(1, 5))
        k = int(rng.integers(2, 5))
        centers = rng.normal(scale=4.0, size=(k, d))
        x = centers[rng.integers(k, size=n)] + rng.normal(size=(n, d))
        yield x, k, int(rng.integers(2**31))


@crit("AC2", "mini-batch with batch >= N equals Lloyd; mini-batch inertia <= 1.05x Lloyd")
def test_ac2_full_batch_equals_lloyd(note):
    worst = 0.0
    for x, k, seed in _instances():
        cfg = MiniBatchConfig(batch_size=len(x) + 7, seed=seed)
        cb = fit_codebook(x, k, cfg)
        cents, labels = lloyd(x.tolist(), init_centroids(x, k, cfg).tolist())
        assert assign_many(cb, x).tolist() == labels
        ref = mean_inertia(cents, x.tolist())
        rel = abs(inertia(cb, x) - ref) / max(ref, 1e-300)
        worst = max(worst, rel)
        assert rel <= 1e-9
    note(f"max rel inertia diff {worst:.1e}")


@crit("AC2", "mini-batch with batch >= N equals Lloyd; mini-batch inertia <= 1.05x Lloyd")
def test_ac2_minibatch_inertia_bound(note):
    worst = 0.0
    for x, k, seed in _instances():
        cfg = MiniBatchConfig(batch_size=max(2, len(x) // 4), seed=seed)
        cb = fit_codebook(x, k, cfg)
        cents, _ = lloyd(x.tolist(), init_centroids(x, k, cfg).tolist())
        ratio = inertia(cb, x) / mean_inertia(cents, x.tolist())
        worst = max(worst, ratio)
        assert ratio <= 1.05
    note(f"max inertia ratio {worst:.4f}")


# --------------------------------------------------------------------------
# 3. ratio semantics
# --------------------------------------------------------------------------

@crit("AC3", "ratio examples, identical distributions, threshold monotonicity")
def test_ac3_ratio_semantics():
    r = compute_ratios(ClusterDistribution([55, 45, 0]), ClusterDistribution([50, 30, 20]))
    assert r.tolist() == [1.1, 1.5, 0.0]
    assert define_anomaly_set(r, 0.05).anomaly_ids == {2}
    same = ClusterDistribution([3, 9, 27, 1])
    assert define_anomaly_set(compute_ratios(same, same), 0.05).anomaly_ids == frozenset()

    rng = np.random.default_rng(3)
    for _ in range(50):
        ref = ClusterDistribution(rng.integers(0, 40, size=8))  # many ratios land in [0, 1]
        mixed = ClusterDistribution(rng.integers(0, 400, size=8) + 1)
        ratios = compute_ratios(ref, mixed)
        prev = frozenset()
        for t in np.linspace(0.0, 1.0, 20):
            cur = define_anomaly_set(ratios, float(t)).anomaly_ids
            assert prev <= cur
            prev = cur


# --------------------------------------------------------------------------
# 4. fusion contract
# --------------------------------------------------------------------------

@crit("AC4", "fraction oracle, gamma monotonicity, fraction == gamma is target")
def test_ac4_fraction_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(1, 40, size=2))
        mask = rng.random((h, w)) < rng.random()
        mask[rng.integers(h), rng.integers(w)] = True
        raster = rng.integers(0, 8, size=(h, w))
        aset = set(rng.choice(8, size=int(rng.integers(0, 5)), replace=False).tolist())
        fg = hits = 0
        for y in range(h):
            for x in range(w):
                if mask[y, x]:
                    fg += 1
                    hits += int(raster[y, x]) in aset
        assert anomaly_fraction(mask, raster, aset) == hits / fg


@crit("AC4", "fraction oracle, gamma monotonicity, fraction == gamma is target")
def test_ac4_gamma_monotone():
    rng = np.random.default_rng(5)
    for _ in range(10):
        grid = FeatureGrid(rng.uniform(-1, 11, size=(8, 8, 2)))
        masks = InstanceMaskSet.from_raster(LabelRaster(rng.integers(0, 6, size=(16, 16)), INSTANCE))
        prev = None
        for i in range(21):
            _, verdicts = fuse_masks_report(make_model(CENTS, [1], gamma=i / 20), grid, masks, 16, 16)
            flagged = {v.mask_id for v in verdicts if v.label == ANOMALY}
            assert prev is None or flagged <= prev
            prev = flagged


@crit("AC4", "fraction oracle, gamma monotonicity, fraction == gamma is target")
def test_ac4_boundary_rational():
    for num, den in [(1, 10), (1, 4), (1, 3), (2, 7), (3, 8), (1, 2), (5, 6), (7, 7)]:
        labels = np.zeros((1, den), dtype=int)
        labels[0, :num] = 1
        grid = FeatureGrid(np.asarray(CENTS)[labels])
        masks = InstanceMaskSet(1, den, [np.ones((1, den), bool)])
        gamma = float(Fraction(num, den))
        _, (v,) = fuse_masks_report(make_model(CENTS, [1], gamma=gamma), grid, masks, 1, den)
        assert v.anomaly_fraction == gamma and v.label == TARGET
        if num > 0:
            below = float(Fraction(num - 1, den)) if num > 1 else 0.0
            _, (v,) = fuse_masks_report(make_model(CENTS, [1], gamma=below), grid, masks, 1, den)
            assert v.label == ANOMALY


# --------------------------------------------------------------------------
# 5. IoU oracle
# --------------------------------------------------------------------------

@crit("AC5", "IoU matches triple-loop oracle; 2x2 worked example yields (33.3, 50.0, 100.0)")
def test_ac5_triple_loop_oracle():
    rng = np.random.default_rng(6)
    for _ in range(50):
        h, w = (int(v) for v in rng.integers(1, 65, size=2))
        p, g = rng.integers(0, 3, size=(h, w)), rng.integers(0, 3, size=(h, w))
        c = accumulate_confusion(p, g)
        tp, fp, fn = confusion_triple_loop(p.tolist(), g.tolist())
        assert (c.tp.tolist(), c.fp.tolist(), c.fn.tolist()) == (tp, fp, fn)
        rep = iou_report(c)
        for k in range(3):
            union = tp[k] + fp[k] + fn[k]
            assert rep.iou[k] == (None if union == 0 else 100.0 * tp[k] / union)


@crit("AC5", "IoU matches triple-loop oracle; 2x2 worked example yields (33.3, 50.0, 100.0)")
def test_ac5_worked_example_as_stated(note):
    rep = iou_report(accumulate_confusion(np.array([[1, 1], [0, 2]]), np.array([[1, 0], [0, 2]])))
    got = tuple(round(rep.iou[k], 1) for k in range(3))
    note(f"got {got}")
    assert got == pytest.approx((33.3, 50.0, 100.0), abs=0.1)


# --------------------------------------------------------------------------
# 6. upsampling
# --------------------------------------------------------------------------

@crit("AC6", "nearest upsampling equals the floor formula on 50 combinations")
def test_ac6_upsampling():
    rng = np.random.default_rng(7)
    combos = [(13, 29, 512, 910)]
    while len(combos) < 50:
        gh, gw = (int(v) for v in rng.integers(1, 30, size=2))
        combos.append((gh, gw, gh + int(rng.integers(0, 90)), gw + int(rng.integers(0, 90))))
    for gh, gw, h, w in combos:
        cells = rng.integers(0, 1000, size=(gh, gw))
        assert upsample_nearest(cells, h, w).tolist() == upsample_formula(cells.tolist(), h, w)


# --------------------------------------------------------------------------
# 7. baseline
# --------------------------------------------------------------------------

@crit("AC7", "radii monotone, 1-D example, >= 95% of rare-blob pixels flagged")
def test_ac7_radii_and_example():
    rng = np.random.default_rng(8)
    for _ in range(20):
        x = rng.normal(size=(int(rng.integers(12, 60)), int(rng.integers(1, 5))))
        prev = np.zeros(len(x))
        for k in range(1, 11):
            r = knn_radii(x, k)
            assert (r >= prev).all()
            prev = r
    pts = np.array([[0.0], [1.0], [2.0], [10.0]])
    assert knn_radii(pts, 1).tolist() == [1.0, 1.0, 1.0, 8.0]
    bag = FeatureBag(np.array([[0.0], [1.0], [2.0]]), np.array([1.0, 1.0, 1.0]), k_sphere=1)
    assert classify_embedding(bag, [0.5], 1) == TARGET
    assert classify_embedding(bag, [5.0], 1) == ANOMALY


@crit("AC7", "radii monotone, 1-D example, >= 95% of rare-blob pixels flagged")
def test_ac7_rare_blobs_flagged(note):
    cfg = SynthConfig(lam=0.05, images_reference=1, images_test=50)
    mixed = [(g, t) for g, t in iter_scenes(cfg, "mixed")]
    emb = np.concatenate([object_embeddings(g, InstanceMaskSet.from_raster(t.instance_gt)) for g, t in mixed])
    bl = BaselineConfig(k_sphere=30, k_vote=5)
    bag = build_bag(emb, bl)
    rare = flagged = 0
    for grid, truth in iter_scenes(cfg, "test"):
        masks = InstanceMaskSet.from_raster(truth.instance_gt)
        pred = baseline_segment(grid, masks, bag, bl, cfg.image_h, cfg.image_w).values
        sel = truth.tri_class_gt.values == ANOMALY
        rare += int(sel.sum())
        flagged += int((pred[sel] == ANOMALY).sum())
    note(f"{flagged}/{rare} rare-blob pixels flagged")
    assert rare > 0 and flagged >= 0.95 * rare


# --------------------------------------------------------------------------
# 8. determinism
# --------------------------------------------------------------------------

@crit("AC8", "every CLI command byte-identical on rerun and across --threads 1 / 8")
def test_ac8_cli_determinism(tmp_path, note):
    corpus = tmp_path / "corpus"
    assert dispatch(["synth", "--out", str(corpus), "--seed", "11", *SYNTH]) == 0
    a = tree(pipeline(corpus, tmp_path / "a", 1))
    b = tree(pipeline(corpus, tmp_path / "b", 1))
    c = tree(pipeline(corpus, tmp_path / "c", 8))
    note(f"{len(a)} files compared")
    assert a == b == c


# --------------------------------------------------------------------------
# 9. timing
# --------------------------------------------------------------------------

@crit("AC9", "CLI reports per-image latency; fused path slower than patch path")
def test_ac9_timing_report(tmp_path, note):
    corpus = tmp_path / "corpus"
    assert dispatch(["synth", "--out", str(corpus)]) == 0
    out = tmp_path / "sweep"
    assert dispatch(["sweep", "--mixed", str(corpus / "mixed.tsv"), "--reference", str(corpus / "reference.tsv"),
                     "--test", str(corpus / "test.tsv"), "--k", "5", "--seeds", "0,1,2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO((out / "timing.csv").read_text())))
    patch = np.mean([float(r["patchMsPerImage"]) for r in rows])
    fused = np.mean([float(r["fusedMsPerImage"]) for r in rows])
    note(f"patch {patch:.3f} ms/img, fused {fused:.3f} ms/img, ratio {fused / patch:.2f}x")
    assert fused > patch
