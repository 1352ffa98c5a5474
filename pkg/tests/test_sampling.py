import numpy as np
import pytest

from icebench.chart_labels import IGNORE, LabelingConfig
from icebench.errors import ConfigError, SceneTooSmall
from icebench.preprocess import FeatureStack, PrepConfig
from icebench.sampling import (
    AugmentationConfig,
    SamplingConfig,
    augment,
    build_patch_dataset,
    collect_patch_records,
    extract_patches,
    patch_candidate_count,
    random_crop,
    read_jsonl,
    summary_path,
)
from oracles import brute_patches


def stack_from(labels, land=None, features=None, sid="s"):
    labels = np.asarray(labels, dtype=np.uint8)
    land = np.zeros(labels.shape, bool) if land is None else land
    features = np.zeros((1,) + labels.shape, np.float32) if features is None else features
    return FeatureStack(sid, ("a",), features, labels, land)


def blocky_labels(seed, shape=(40, 40), n=5):
    rng = np.random.default_rng(seed)
    rr, cc = np.mgrid[:shape[0], :shape[1]]
    centres = rng.integers(0, shape[0], size=(n, 2))
    d = (rr[..., None] - centres[:, 0]) ** 2 + (cc[..., None] - centres[:, 1]) ** 2
    lab = rng.integers(0, 6, size=n)[d.argmin(-1)].astype(np.uint8)
    lab[rng.random(shape) < 0.01] = IGNORE
    return lab


def test_candidate_count_400_224_100():
    assert patch_candidate_count(400, 400, 224, 100) == 4
    assert patch_candidate_count(200, 400, 224, 100) == 0


def test_defaults_depend_on_mode():
    assert SamplingConfig().patch_size == 224
    assert SamplingConfig(mode="crop").patch_size == 256
    with pytest.raises(ConfigError):
        SamplingConfig(purity=0.5)


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("border,purity", [(0, 1.0), (3, 1.0), (5, 0.8)])
def test_extract_matches_brute_force(seed, border, purity):
    lab = blocky_labels(seed)
    land = np.zeros(lab.shape, bool)
    land[:, :2] = seed % 2 == 0
    feats = np.random.default_rng(seed).normal(size=(2,) + lab.shape).astype(np.float32)
    feats[0, 30, 30] = np.nan
    st = FeatureStack("s", ("a", "b"), feats, lab, land)
    cfg = SamplingConfig(patch_size=8, stride=3, purity=purity, border_distance=border)
    got = [(r.row, r.col, r.label) for r in extract_patches(st, cfg)]
    assert got == brute_patches(lab, land, feats, 8, 3, purity, border)


def test_border_distance_is_anti_monotone():
    lab = blocky_labels(11)
    st = stack_from(lab)
    prev = None
    for d in (0, 1, 2, 4, 8):
        acc = {(r.row, r.col) for r in extract_patches(st, SamplingConfig(patch_size=6, stride=2, border_distance=d))}
        if prev is not None:
            assert acc <= prev
        prev = acc


def test_border_pixel_at_exactly_d_rejects():
    lab = np.zeros((10, 10), np.uint8)
    lab[0, 9] = 3  # window (2, 2) spans rows and cols 2..6: gap max(2, 3) = 3
    st = stack_from(lab)
    ok = lambda d: {(r.row, r.col) for r in extract_patches(st, SamplingConfig(patch_size=5, stride=2, border_distance=d))}
    assert (2, 2) in ok(2) and (2, 2) not in ok(3)


def test_euclidean_metric_is_looser_than_chebyshev():
    lab = blocky_labels(5)
    st = stack_from(lab)
    cheb = {(r.row, r.col) for r in extract_patches(st, SamplingConfig(patch_size=6, stride=2, border_distance=4))}
    euc = {(r.row, r.col) for r in extract_patches(
        st, SamplingConfig(patch_size=6, stride=2, border_distance=4, border_metric="euclidean"))}
    assert cheb <= euc


def test_random_crop_is_keyed_and_skips_ignore():
    lab = np.full((20, 20), IGNORE, np.uint8)
    lab[15:, 15:] = 2
    st = stack_from(lab)
    cfg = SamplingConfig(mode="crop", patch_size=8, seed=4)
    a = [random_crop(st, cfg, i) for i in range(10)]
    b = [random_crop(st, cfg, i) for i in range(10)]
    assert [(c.row, c.col) for c in a if c] == [(c.row, c.col) for c in b if c]
    for c in a:
        if c is not None:
            assert (c.labels != IGNORE).any()
    assert random_crop(stack_from(np.full((8, 8), IGNORE, np.uint8)), cfg, 0) is None
    with pytest.raises(SceneTooSmall):
        random_crop(stack_from(np.zeros((4, 20), np.uint8)), cfg, 0)


def test_augment_preserves_patch_class_and_is_deterministic():
    f = np.random.default_rng(0).normal(size=(2, 9, 9)).astype(np.float32)
    cfg = AugmentationConfig(rotation_max_deg=10)
    a, la = augment(f, 4, cfg, (0, "s", 1))
    b, lb = augment(f, 4, cfg, (0, "s", 1))
    assert la == lb == 4 and np.array_equal(a, b, equal_nan=True)
    off, _ = augment(f, 4, AugmentationConfig(enabled=False), 0)
    assert off is f


def test_augment_flip_only_reverses_rows():
    f = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    lab = np.arange(16, dtype=np.uint8).reshape(4, 4)
    cfg = AugmentationConfig(rotation_max_deg=0)
    for key in range(20):
        out, olab = augment(f, lab, cfg, key)
        assert np.array_equal(out, f) or np.array_equal(out, f[:, ::-1])
        assert np.array_equal(olab[::-1] if not np.array_equal(out, f) else olab, lab)


def test_augment_rotation_fills_labels_with_ignore():
    lab = np.zeros((21, 21), np.uint8)
    f = np.zeros((1, 21, 21), np.float32)
    cfg = AugmentationConfig(rotation_max_deg=45, vertical_flip=False)
    out, olab = augment(f, lab, cfg, 123)
    assert olab.shape == lab.shape and set(np.unique(olab)) <= {0, IGNORE}


def test_jsonl_identical_across_workers(separable_data, tmp_path):
    _, paths = separable_data
    label_cfg = LabelingConfig()
    cfg = SamplingConfig(patch_size=64, stride=48, border_distance=5)
    prep = PrepConfig(channels=("nersc_sar_primary",))
    s1 = build_patch_dataset(paths[:6], label_cfg, cfg, tmp_path / "w1.jsonl", prep, workers=1)
    s3 = build_patch_dataset(paths[:6], label_cfg, cfg, tmp_path / "w3.jsonl", prep, workers=3)
    assert (tmp_path / "w1.jsonl").read_bytes() == (tmp_path / "w3.jsonl").read_bytes()
    assert s1 == s3 and s1["n_samples"] == len(read_jsonl(tmp_path / "w1.jsonl"))
    assert summary_path(tmp_path / "w1.jsonl").is_file()
    recs = collect_patch_records(paths[:2], label_cfg, cfg, prep)
    assert recs == read_jsonl(tmp_path / "w1.jsonl")[:len(recs)]
