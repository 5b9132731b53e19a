import itertools
import math

import numpy as np
import pytest

from pasta_seg.clustering import ClusterCodebook, MiniBatchConfig, assign_many, fit_codebook
from pasta_seg.containers import ANOMALY, BACKGROUND, TARGET
from pasta_seg.distribution import build_model
from pasta_seg.errors import InvalidConfig
from pasta_seg.synth import (
    SynthConfig,
    generate_component_means,
    generate_corpus,
    generate_scene,
    image_rng,
    iter_scenes,
    means_rng,
    patch_values,
)
from pasta_seg.tensor_io import read_manifest

SMALL = dict(dim=8, grid_h=12, grid_w=12, image_h=36, image_w=48,
             images_mixed=6, images_reference=4, images_test=3)


def test_two_means_separated():
    cfg = SynthConfig(dim=4, n_background=1, n_target=1, n_anomaly=0, lam=0.0, delta=3.0)
    m = generate_component_means(cfg, np.random.default_rng(0))
    assert np.linalg.norm(m[0] - m[1]) >= 3.0


def test_six_means_pairwise():
    cfg = SynthConfig(dim=5, n_background=2, n_target=2, n_anomaly=2, delta=10.0)
    m = generate_component_means(cfg, np.random.default_rng(1))
    dists = [np.linalg.norm(a - b) for a, b in itertools.combinations(m, 2)]
    assert len(dists) == 15 and min(dists) >= 10.0


def test_default_delta():
    assert SynthConfig(dim=64, sigma=2.0).min_separation == pytest.approx(10 * 2.0 * 8)


@pytest.mark.parametrize("bad", [
    dict(delta=0.0), dict(sigma=-1.0), dict(lam=1.5), dict(image_h=8, grid_h=16), dict(dim=1),
])
def test_invalid_configs(bad):
    with pytest.raises(InvalidConfig):
        SynthConfig(**bad).validate()


def test_lam_zero_has_no_anomalies():
    cfg = SynthConfig(lam=0.0, **SMALL)
    for _, truth in iter_scenes(cfg, "mixed"):
        assert not (truth.tri_class_gt.values == ANOMALY).any()


def test_sigma_zero_patches_equal_means():
    cfg = SynthConfig(sigma=0.0, delta=5.0, **SMALL)
    means = generate_component_means(cfg, means_rng(cfg))
    grid, truth = generate_scene(cfg, means, image_rng(cfg, "mixed", 0))
    expected = means[truth.patch_component].astype(np.float32)
    assert np.array_equal(grid.values, expected)


def test_scene_is_deterministic():
    cfg = SynthConfig(**SMALL)
    means = generate_component_means(cfg, means_rng(cfg))
    a = generate_scene(cfg, means, image_rng(cfg, "test", 2))
    b = generate_scene(cfg, means, image_rng(cfg, "test", 2))
    assert a[0] == b[0]
    assert a[1].tri_class_gt.values.tobytes() == b[1].tri_class_gt.values.tobytes()
    assert a[1].instance_gt.values.tobytes() == b[1].instance_gt.values.tobytes()


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_corpus_byte_identical_and_thread_independent(tmp_path):
    cfg = SynthConfig(seed=3, **SMALL)
    generate_corpus(cfg, tmp_path / "a")
    generate_corpus(cfg, tmp_path / "b", threads=4)
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a == b and "truth.csv" in a


def test_corpus_manifests_and_reference_purity(tmp_path):
    cfg = SynthConfig(lam=0.8, **{**SMALL, "images_reference": 1})
    paths = generate_corpus(cfg, tmp_path)
    for role, path in paths.items():
        man = read_manifest(path)
        assert man.role == role and len(man) == getattr(cfg, f"images_{role}")
        assert man.dim == cfg.dim
    ref = read_manifest(paths["reference"])
    for rec in ref:
        assert not (rec.load_gt().values == ANOMALY).any()
    mixed_anomalies = sum(int((rec.load_gt().values == ANOMALY).sum()) for rec in read_manifest(paths["mixed"]))
    assert mixed_anomalies > 0


def test_truth_is_patch_aligned_and_consistent():
    cfg = SynthConfig(**SMALL)
    ph, pw = cfg.image_h // cfg.grid_h, cfg.image_w // cfg.grid_w
    for _, truth in iter_scenes(cfg, "mixed"):
        tri, inst = truth.tri_class_gt.values, truth.instance_gt.values
        blocks = tri.reshape(cfg.grid_h, ph, cfg.grid_w, pw)
        assert (blocks == blocks[:, :1, :, :1]).all()
        assert np.array_equal(patch_values(truth.tri_class_gt, cfg.grid_h, cfg.grid_w), truth.patch_class)
        assert ((inst > 0) == (tri != BACKGROUND)).all()
        for mid in np.unique(inst[inst > 0]):
            assert len(np.unique(tri[inst == mid])) == 1


def test_patch_components_match_classes():
    cfg = SynthConfig(**SMALL)
    nb, nt = cfg.n_background, cfg.n_target
    for _, truth in iter_scenes(cfg, "test"):
        comp, klass = truth.patch_component, truth.patch_class
        assert (comp[klass == BACKGROUND] < nb).all()
        assert ((comp[klass == TARGET] >= nb) & (comp[klass == TARGET] < nb + nt)).all()
        assert (comp[klass == ANOMALY] >= nb + nt).all()


def test_anomaly_fraction_matches_lambda():
    # per image, anomaly patches minus lam * blob patches has zero mean
    cfg = SynthConfig(**{**SMALL, "dim": 2, "lam": 0.3, "images_mixed": 200})
    diffs = []
    for _, truth in iter_scenes(cfg, "mixed"):
        klass = truth.patch_class
        diffs.append((klass == ANOMALY).sum() - cfg.lam * (klass != BACKGROUND).sum())
    diffs = np.asarray(diffs, dtype=float)
    se = diffs.std(ddof=1) / math.sqrt(len(diffs))
    assert abs(diffs.mean()) <= 3 * se


def test_mixture_probability_of_anomaly_cluster():
    cfg = SynthConfig(**{**SMALL, "dim": 16, "images_mixed": 200})
    means = generate_component_means(cfg, means_rng(cfg))
    mixed = [g for g, _ in iter_scenes(cfg, "mixed", means)]
    # perfectly separated: nearest-mean assignment recovers the components
    cb = ClusterCodebook(means, np.ones(len(means), dtype=int))
    per_image = np.array([(assign_many(cb, g.vectors()) == len(means) - 1).mean() for g in mixed])
    blob_share = np.array([(t.patch_class != BACKGROUND).mean() for _, t in iter_scenes(cfg, "mixed", means)])
    expected = cfg.lam * blob_share.mean()
    se = per_image.std(ddof=1) / math.sqrt(len(per_image))
    assert abs(per_image.mean() - expected) <= 3 * se + 1e-12


def test_fitted_model_flags_planted_anomaly():
    cfg = SynthConfig(**{**SMALL, "dim": 16, "images_mixed": 40, "images_reference": 40})
    mixed = [g for g, _ in iter_scenes(cfg, "mixed")]
    truths = [t for _, t in iter_scenes(cfg, "mixed")]
    ref = [g for g, _ in iter_scenes(cfg, "reference")]
    x = np.concatenate([g.vectors() for g in mixed]).astype(np.float64)
    cb = fit_codebook(x, cfg.n_components, MiniBatchConfig(batch_size=512, seed=0))
    labels = assign_many(cb, x)
    comps = np.concatenate([t.patch_component.ravel() for t in truths])
    anomaly_comp = cfg.n_components - 1
    planted = {int(c) for c in np.unique(labels[comps == anomaly_comp])}
    model = build_model(cb, mixed, ref)
    assert model.anomaly_set.anomaly_ids == planted and len(planted) == 1
