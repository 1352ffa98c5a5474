"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line through the ``criterion`` fixture; the
lines are repeated in the terminal summary.
"""
import hashlib
import json
import time
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ice_polygon, make_scene
from oracles import brute_confusion, brute_patches, brute_weighted
from icebench import experiments as ex
from icebench.chart_labels import IGNORE, LabelingConfig, map_sigrid_code, polygon_label
from icebench.cli import main
from icebench.metrics import (
    ResourceSample,
    accuracy,
    confusion,
    core_hours,
    efficiency_report,
    metrics_report,
    recall_w,
    summarize_samples,
)
from icebench.partition import MeltClimatology, PartitionContext, class_distribution, group_by, make_splits
from icebench.preprocess import PrepConfig, downscale, prepare_scene
from icebench.refmodels import (
    PatchRefModel,
    SoftmaxState,
    TrainConfig,
    cross_entropy,
    fit,
    loss_and_grad,
)
from icebench.sampling import SamplingConfig, build_patch_dataset, extract_patches, patch_candidate_count
from icebench.scene_store import IceChartPolygon, Partial, write_scene
from icebench.synthgen import checkerboard_spec, generate, single_informative_spec

SIGRID = {
    0: 0, 80: 0,
    81: 1, 82: 1,
    83: 2, 84: 2, 85: 2,
    87: 3, 88: 3, 89: 3,
    86: 4, 91: 4, 93: 4,
    95: 5, 96: 5, 97: 5,
}
UNLISTED = (1, 42, 90, 92, 99)


def random_pairs(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    values = np.array([0, 1, 2, 3, 4, 5, IGNORE])
    for _ in range(n):
        k = int(rng.integers(1, 101))
        yield rng.choice(values, k), rng.choice(values, k)


def test_c01_weighted_metrics_match_brute_force(criterion):
    start = time.perf_counter()
    worst, scored = 0.0, 0
    for t, p in random_pairs():
        cm = confusion(t, p)
        assert np.array_equal(cm.counts, brute_confusion(t, p))
        if cm.total == 0:
            continue
        got, ref = metrics_report(cm), brute_weighted(t, p)
        worst = max(worst, max(abs(getattr(got, k) - v) for k, v in ref.items()))
        scored += 1
    fixed = metrics_report(confusion([0, 0, 1, 1], [0, 1, 1, 1]))
    fixed_ok = (fixed.accuracy == 0.75 and abs(fixed.precision - 5 / 6) < 1e-9 and fixed.recall == 0.75
                and abs(fixed.f1 - 11 / 15) < 1e-9 and abs(fixed.iou - 7 / 12) < 1e-9)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and fixed_ok and elapsed < 10
    assert criterion(1, ok, f"{scored} pairs, max |diff| {worst:.1e}, fixed case {fixed_ok}, {elapsed:.2f}s")


def test_c02_weighted_recall_equals_accuracy(criterion):
    mismatches, n = 0, 0
    for t, p in random_pairs():
        cm = confusion(t, p)
        if cm.total == 0:
            continue
        n += 1
        mismatches += recall_w(cm) != accuracy(cm)
    assert criterion(2, mismatches == 0, f"{n} pairs, {mismatches} exact mismatches")


def test_c03_sigrid_table(criterion):
    wrong = [c for c, k in SIGRID.items() if map_sigrid_code(c) != k]
    leaked = [c for c in UNLISTED if map_sigrid_code(c) is not None]
    ok = not wrong and not leaked
    assert criterion(3, ok, f"{len(SIGRID)} listed codes ({wrong or 'all correct'}), "
                            f"{len(UNLISTED)} unlisted ({leaked or 'all unknown'})")


codes = st.sampled_from(sorted(SIGRID) + list(UNLISTED))


@st.composite
def chart_polygons(draw):
    total = draw(st.floats(0, 100))
    parts, left = [], total
    for _ in range(draw(st.integers(0, 3))):
        c = draw(st.floats(0, max(left, 0.0)))
        parts.append(Partial(draw(codes), c))
        left -= c
    return IceChartPolygon(0, total, tuple(parts))


def test_c04_dominance_properties(criterion):
    failures = []

    @settings(max_examples=500, deadline=None, database=None)
    @given(chart_polygons(), st.floats(0.501, 1.0), st.floats(0.501, 1.0))
    def check(poly, t1, t2):
        lo, hi = sorted((t1, t2))
        a = polygon_label(poly, LabelingConfig(lo))
        b = polygon_label(poly, LabelingConfig(hi))
        if poly.total_sic == 0:
            if a != 0 or b != 0:
                failures.append(("zero total not open water", poly))
            return
        shares = [min(p.concentration / poly.total_sic, 1.0) for p in poly.partials]
        if sum(s >= lo for s in shares) > 1:
            failures.append(("two dominant partials", poly))
        if b != IGNORE and a != b:
            failures.append(("threshold not anti-monotone", poly))

    try:
        check()
    except AssertionError:
        pass
    assert criterion(4, not failures, f"500 generated polygons, {len(failures)} violations")


def blob_scene(seed, size=400):
    rng = np.random.default_rng(seed)
    ids = np.zeros((size, size), np.int32)
    polys = [ice_polygon(0, int(rng.choice([0, 91, 95])))]
    for j in range(1, int(rng.integers(2, 6))):
        h, w = rng.integers(5, 30, 2)
        r, c = rng.integers(0, size - h), rng.integers(0, size - w)
        ids[r:r + h, c:c + w] = j
        polys.append(ice_polygon(j, int(rng.choice([81, 83, 87]))))
    return make_scene(ids, polys, {"a": rng.normal(size=(size, size))}, scene_id=f"blob{seed}")


def test_c05_patch_extraction(criterion, tmp_path):
    count = patch_candidate_count(400, 400, 224, 100)
    cfg = SamplingConfig(patch_size=224, stride=100, border_distance=20)
    prep = PrepConfig(channels=("a",))
    scenes = [blob_scene(500 + i) for i in range(10)]
    stacks = [prepare_scene(sc, prep) for sc in scenes]
    paths = [write_scene(sc, tmp_path / "scenes" / sc.scene_id) for sc in scenes]
    mismatched, accepted, accepted_free = 0, 0, 0
    for s in stacks:
        got = [(r.row, r.col, r.label) for r in extract_patches(s, cfg)]
        ref = brute_patches(s.labels, s.land, s.features, 224, 100, 1.0, 20)
        mismatched += sorted(got) != sorted(ref)
        accepted += len(got)
        accepted_free += len(extract_patches(s, SamplingConfig(patch_size=224, stride=100)))
    build_patch_dataset(paths, LabelingConfig(), cfg, tmp_path / "w1.jsonl", prep, workers=1)
    build_patch_dataset(paths, LabelingConfig(), cfg, tmp_path / "w8.jsonl", prep, workers=8)
    same = (tmp_path / "w1.jsonl").read_bytes() == (tmp_path / "w8.jsonl").read_bytes()
    ok = count == 4 and mismatched == 0 and same and accepted < accepted_free
    assert criterion(5, ok, f"{count} candidates on 400/224/100; oracle mismatches {mismatched}/10 "
                            f"({accepted} accepted with border 20, {accepted_free} without); "
                            f"1 vs 8 workers identical {same}")


def test_c06_block_average_conserves_mean(criterion):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=tuple(rng.integers(10, 60, 2))) * rng.uniform(0.1, 100)
        for r in (2, 5):
            h, w = x.shape[0] // r * r, x.shape[1] // r * r
            worst = max(worst, abs(downscale(x, r).mean() - x[:h, :w].mean()))
    identity = all(downscale(x, 1).tobytes() == x.tobytes()
                   for x in (rng.normal(size=tuple(rng.integers(1, 40, 2))) for _ in range(100)))
    ok = worst <= 1e-6 and identity
    assert criterion(6, ok, f"100 rasters at ratios 2 and 5, max mean drift {worst:.1e}; ratio 1 bit-exact {identity}")


def test_c07_partitions(criterion, separable_data):
    out, paths = separable_data
    clim = MeltClimatology.from_json(json.loads((out / "climatology.json").read_text()))
    ctx = PartitionContext(climatology=clim)
    problems = []
    for kind in ("season", "cryo"):
        groups = group_by(paths, kind, ctx)
        flat = [p for g in groups.values() for p in g]
        if len(flat) != len(set(flat)) or sorted(flat) != sorted(paths):
            problems.append(f"{kind} not a partition")
    if make_splits(paths, seed=11) != make_splits(paths, seed=11):
        problems.append("splits not deterministic")
    tr, va = make_splits(paths, seed=11)
    if set(tr.scenes) & set(va.scenes):
        problems.append("train/validation overlap")
    rows = {**class_distribution(paths, kind="season", ctx=ctx), **class_distribution(paths, kind="cryo", ctx=ctx)}
    worst = max(abs(sum(v) - 1) for v in rows.values())
    if worst > 1e-9:
        problems.append(f"distribution row off by {worst}")
    assert criterion(7, not problems, "season/cryo partitions, deterministic splits, "
                                      f"{len(rows)} distribution rows (max |sum-1| {worst:.1e})"
                                      + (f": {problems}" if problems else ""))


SEPARABLE_TRAIN = {"learning_rate": 0.05, "max_epochs": 50, "early_stop_patience": 5}


def test_c08_separable_scenes_are_learned(criterion, separable_data):
    _, paths = separable_data
    train, test = paths[:16], paths[16:]
    start = time.perf_counter()
    base = {"train": SEPARABLE_TRAIN, "holdout": {"fixed_count": 2}}
    patch = ex.run_cell(ex.PipelineConfig.from_json(
        {"paradigm": "patch", "sampling": {"patch_size": 64, "stride": 32}, **base}), train, test)
    pixel = ex.run_cell(ex.PipelineConfig.from_json(
        {"paradigm": "pixel", "sampling": {"patch_size": 64, "epoch_steps": 200}, **base}), train, test)
    elapsed = time.perf_counter() - start
    f_patch = patch["metrics"]["weighted"]["f1"] if patch["status"] == "ok" else float("nan")
    f_pixel = pixel["metrics"]["weighted"]["f1"] if pixel["status"] == "ok" else float("nan")
    ok = f_patch >= 0.95 and f_pixel >= 0.90 and elapsed < 300
    assert criterion(8, ok, f"patch F1 {f_patch:.4f}, pixel F1 {f_pixel:.4f}, {elapsed:.1f}s")


def test_c09_fair_comparison_on_checkerboard(criterion, tmp_path):
    train = generate(checkerboard_spec(n_scenes=8, checker_block=100, scene_prefix="coarse_"), tmp_path / "a")
    test = generate(checkerboard_spec(n_scenes=3, checker_block=16, seed=7, scene_prefix="fine_"), tmp_path / "b")
    base = {"train": {"learning_rate": 0.05, "max_epochs": 40, "early_stop_patience": 5},
            "holdout": {"fixed_count": 2}}
    pc = ex.PipelineConfig.from_json({"paradigm": "patch", "sampling": {"patch_size": 64, "stride": 32}, **base})
    xc = ex.PipelineConfig.from_json({"paradigm": "pixel", "sampling": {"patch_size": 64, "epoch_steps": 200}, **base})
    cache = ex.SceneCache()
    tr, va = ex.split_train_val(train, pc)
    patch, pixel = ex.fit_cell(pc, tr, va, cache), ex.fit_cell(xc, tr, va, cache)
    shared = patch.stats.normalization_id == pixel.stats.normalization_id
    res = ex.fair_compare(patch.model, pixel.model, ex.build_stacks(test, pc, patch.stats, cache), 64)
    f_patch, f_pixel = res["patch"]["weighted"]["f1"], res["pixel"]["weighted"]["f1"]
    ok = shared and f_patch < f_pixel
    assert criterion(9, ok, f"16-px checkerboard at 64-px tiles: patch F1 {f_patch:.4f} < pixel F1 {f_pixel:.4f}")


def numeric_grad(W, b, X, y, eps=1e-6):
    gW, gb = np.zeros_like(W), np.zeros_like(b)
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += eps
        Wm[idx] -= eps
        gW[idx] = (loss_and_grad(Wp, b, X, y)[0] - loss_and_grad(Wm, b, X, y)[0]) / (2 * eps)
    for i in range(len(b)):
        bp, bm = b.copy(), b.copy()
        bp[i] += eps
        bm[i] -= eps
        gb[i] = (loss_and_grad(W, bp, X, y)[0] - loss_and_grad(W, bm, X, y)[0]) / (2 * eps)
    return gW, gb


def test_c10_softmax_training(criterion):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(50):
        n, d = rng.integers(1, 30), rng.integers(1, 6)
        X, y = rng.normal(size=(n, d)), rng.integers(0, 6, size=n)
        W, b = rng.normal(size=(6, d)), rng.normal(size=6)
        _, gW, gb = loss_and_grad(W, b, X, y)
        nW, nb = numeric_grad(W, b, X, y)
        scale = max(np.abs(gW).max(), np.abs(gb).max(), 1e-8)
        worst = max(worst, max(np.abs(gW - nW).max(), np.abs(gb - nb).max()) / scale)
    X = np.array([[1.0], [-1.0]] * 4)
    y = np.array([0, 1] * 4)
    patience = 4
    _, log = fit(X, y, X, 1 - y, TrainConfig(learning_rate=0.5, batch_size=8, early_stop_patience=patience))
    stopped = len(log) == patience + 1
    Xt = rng.normal(size=(300, 3))
    yt = (Xt[:, 0] > 0).astype(int) + 2 * (Xt[:, 1] > 0.5)
    Xv = rng.normal(size=(80, 3))
    yv = (Xv[:, 0] > 0).astype(int) + 2 * (Xv[:, 1] > 0.5)
    state, log2 = fit(Xt, yt, Xv, yv, TrainConfig(learning_rate=0.2, max_epochs=40, early_stop_patience=3))
    best_gap = abs(cross_entropy(state, Xv, yv) - min(r["val_loss"] for r in log2))
    ok = worst < 1e-4 and stopped and best_gap < 1e-12
    assert criterion(10, ok, f"50 gradient checks (max rel err {worst:.1e}); stop after {len(log)} epochs "
                             f"with patience {patience}; best-state gap {best_gap:.1e}")


def test_c11_efficiency_accounting(criterion):
    exact = core_hours(0.5, 2, 4) == 4.0
    rng = np.random.default_rng(11)
    violations, worst = 0, 0.0
    for _ in range(100):
        n = int(rng.integers(1, 40))
        t = np.cumsum(rng.uniform(0.01, 5, n))
        mem = rng.uniform(0, 8e9, n)
        busy = rng.uniform(0, 1, n)
        samples = [ResourceSample(*row) for row in zip(t, mem, busy)]
        units = int(rng.integers(1, 5))
        tr = summarize_samples(samples, "training", computing_units=units)
        inf = summarize_samples(samples[: max(1, n // 2)], "inference")
        epochs = int(rng.integers(1, 20))
        rep = efficiency_report(tr, inf, epochs=epochs)
        violations += rep.MaxMT < rep.AvgMT or rep.MaxMI < rep.AvgMI
        # recompute from the raw stream
        span = t[-1] - t[0]
        if n > 1 and span > 0:
            avg_mem = sum((mem[i] + mem[i + 1]) / 2 * (t[i + 1] - t[i]) for i in range(n - 1)) / span
            avg_busy = sum((busy[i] + busy[i + 1]) / 2 * (t[i + 1] - t[i]) for i in range(n - 1)) / span
        else:
            avg_mem, avg_busy = mem.mean(), busy.mean()
        expected = {"MaxMT": mem.max() / 1e9, "AvgMT": avg_mem / 1e9, "TotCT": avg_busy * span / 3600 * units,
                    "TotTT": span / 3600, "AvgET": span / 3600 * 60 / epochs}
        worst = max(worst, max(abs(getattr(rep, k) - v) for k, v in expected.items()))
    ok = exact and violations == 0 and worst <= 1e-9
    assert criterion(11, ok, f"core_hours(0.5, 2, 4) == 4.0 {exact}; Max < Avg in {violations}/100 streams; "
                             f"recomputation max |diff| {worst:.1e}")


def test_c12_feature_ablation(criterion, tmp_path):
    rng = np.random.default_rng(12)
    W = np.zeros((6, 4))
    W[:, 0] = 2 * np.arange(6)
    model = PatchRefModel(("a", "b"), SoftmaxState(W, -np.arange(6.0) ** 2))
    targets = rng.integers(0, 6, size=60)
    windows = [np.stack([np.full((4, 4), float(k)), rng.normal(size=(4, 4))]) for k in targets]
    zero = ex.feature_ablation(model, windows, targets)["overall"]["b"]

    paths = generate(single_informative_spec(n_scenes=8, height=200, width=200, coarse_factor=8), tmp_path)
    cfg = ex.PipelineConfig.from_json({"paradigm": "patch", "sampling": {"patch_size": 32, "stride": 32},
                                       "train": SEPARABLE_TRAIN, "holdout": {"fixed_count": 1}})
    cache = ex.SceneCache()
    tr, va = ex.split_train_val(paths[:6], cfg)
    trained = ex.fit_cell(cfg, tr, va, cache)
    stacks = ex.build_stacks(paths[6:], cfg, trained.stats, cache)
    _, wins, labels = ex.patch_samples(stacks, cfg, training=False)
    drops = ex.feature_ablation(trained.model, wins, labels)["overall"]
    top = max(drops, key=drops.get)
    ok = zero == 0.0 and top == "nersc_sar_primary"
    assert criterion(12, ok, f"zero-weight channel drop {zero}; largest drop {top} ({drops[top]:.4f})")


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def cli_pipeline(root):
    root.mkdir(parents=True)
    synth = _write(root / "synth.json", {"preset": "separable", "n_scenes": 8, "height": 96, "width": 96,
                                         "coarse_factor": 8, "n_polygons": 3, "seed": 5})
    assert main(["synth", "--config", synth, "--out", str(root / "data")]) == 0
    scenes = json.loads((root / "data" / "dataset.json").read_text())["scenes"]
    _write(root / "train.json", {"split": "train", "scenes": ["data/" + s for s in scenes[:6]]})
    _write(root / "test.json", {"split": "test", "scenes": ["data/" + s for s in scenes[6:]]})
    exp = _write(root / "exp.json", {"seed": 9, "data": {"train": "train.json", "test": "test.json"},
                                     "pipeline": {"paradigm": "patch", "sampling": {"patch_size": 24, "stride": 12},
                                                  "train": SEPARABLE_TRAIN, "holdout": {"fixed_count": 1}}})
    assert main(["train", "--config", exp, "--out", str(root / "model")]) == 0
    assert main(["evaluate", "--config", exp, "--out", str(root / "model")]) == 0
    rep = _write(root / "rep.json", {"reports": ["model/evaluation.json"]})
    assert main(["report", "--config", rep, "--out", str(root / "report")]) == 0
    return root / "report" / "metrics.json"


def test_c13_cli_runs_are_reproducible(criterion, tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = cli_pipeline(tmp_path / "run1")
        b = cli_pipeline(tmp_path / "run2")
    ha, hb = (hashlib.sha256(p.read_bytes()).hexdigest() for p in (a, b))
    assert criterion(13, ha == hb, f"synth -> train -> evaluate -> report twice: metrics.json {ha[:12]} vs {hb[:12]}")
