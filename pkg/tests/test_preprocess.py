import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import ice_polygon, make_scene
from icebench.chart_labels import IGNORE
from icebench.errors import DegenerateChannel, EmptyOutput, IncompatibleGrid, MissingStats
from icebench.preprocess import (
    AlignmentPolicy,
    NormalizationStats,
    PrepConfig,
    apply_mask_and_normalize,
    compute_normalization,
    downscale,
    downscale_ids,
    downscale_labels,
    downscale_scene,
    month_value,
    prepare_scene,
)
from icebench.scene_store import ChannelSpec


def brute_block(raster, r, reduce):
    h, w = raster.shape[0] // r, raster.shape[1] // r
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = reduce(raster[i * r:(i + 1) * r, j * r:(j + 1) * r])
    return out


@pytest.mark.parametrize("ratio", [2, 3, 5])
def test_block_average_matches_loop(ratio):
    x = np.random.default_rng(ratio).normal(size=(23, 17))
    assert np.allclose(downscale(x, ratio), brute_block(x, ratio, np.mean), atol=1e-12)
    assert np.array_equal(downscale(x, ratio, "block_max"), brute_block(x, ratio, np.max))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 30)), elements=st.floats(-1e3, 1e3)))
def test_ratio_one_is_bit_identity(x):
    assert downscale(x, 1).tobytes() == x.tobytes()


def test_nan_pixels_are_skipped_and_all_nan_blocks_stay_nan():
    x = np.array([[1.0, np.nan, np.nan, np.nan], [3.0, np.nan, np.nan, np.nan]])
    out = downscale(x, 2)
    assert out[0, 0] == 2.0 and np.isnan(out[0, 1])


def test_ratio_larger_than_raster():
    with pytest.raises(EmptyOutput):
        downscale(np.zeros((3, 3)), 4)


def test_label_majority_ties_to_smaller_class():
    lab = np.array([[4, 2], [2, 4]], dtype=np.uint8)
    assert downscale_labels(lab, 2)[0, 0] == 2
    lab = np.array([[IGNORE, IGNORE], [IGNORE, 3]], dtype=np.uint8)
    assert downscale_labels(lab, 2)[0, 0] == 3
    assert downscale_labels(np.full((2, 2), IGNORE, np.uint8), 2)[0, 0] == IGNORE


def test_ids_majority():
    ids = np.array([[5, 5, -1, -1], [1, 2, -1, 3]])
    assert downscale_ids(ids, 2).tolist() == [[5, 3]]


def test_coarse_channel_upsampled_by_replication():
    ids = np.zeros((8, 8), dtype=np.int32)
    coarse = np.arange(4, dtype=np.float32).reshape(2, 2)
    s = make_scene(ids, [ice_polygon(0)], {"fine": np.zeros((8, 8)), "coarse": coarse})
    out = downscale_scene(s, 2)
    assert out.channel("coarse").data.tolist() == [[0, 0, 1, 1]] * 2 + [[2, 2, 3, 3]] * 2
    assert out.provenance["downscale_ratio"] == 2
    assert out.provenance["alignment_policy"]["coarse"] == "nearest_replicate"


def test_fine_channel_downsampled_to_reference():
    ids = np.zeros((2, 2), dtype=np.int32)
    fine = np.arange(16, dtype=np.float32).reshape(4, 4)
    s = make_scene(ids, [ice_polygon(0)], {"fine": fine})
    out = downscale_scene(s, 1)
    assert out.channel("fine").data.tolist() == [[2.5, 4.5], [10.5, 12.5]]


def test_non_integer_reduction_rejected():
    ids = np.zeros((2, 2), dtype=np.int32)
    s = make_scene(ids, [ice_polygon(0)], {"odd": np.zeros((5, 5))})
    with pytest.raises(IncompatibleGrid):
        downscale_scene(s, 1)


def test_distance_map_never_averaged():
    ids = np.zeros((4, 4), dtype=np.int32)
    dm = np.array([[0, 3, 5, 5]] * 4, dtype=np.float32)
    s = make_scene(ids, [ice_polygon(0)], {"distance_map": dm})
    out = downscale_scene(s, 2)
    assert set(np.unique(out.channel("distance_map").data)) <= {3.0, 5.0}
    assert out.land_mask[:, 0].all() and not out.land_mask[:, 1].any()


def _scene_with(values, sid):
    ids = np.zeros(values.shape, dtype=np.int32)
    return make_scene(ids, [ice_polygon(0)], {"a": values}, scene_id=sid)


def test_normalization_matches_pooled_moments():
    rng = np.random.default_rng(1)
    parts = [rng.normal(3, 2, size=(5, 7)) for _ in range(4)]
    parts[1][0, 0] = np.nan
    stats = compute_normalization([_scene_with(p, f"s{i}") for i, p in enumerate(parts)], ["a", "month"])
    pooled = np.concatenate([p.astype(np.float32).ravel() for p in parts]).astype(np.float64)
    pooled = pooled[np.isfinite(pooled)]
    assert "month" not in stats.mean
    assert stats.mean["a"] == pytest.approx(pooled.mean(), abs=1e-9)
    assert stats.std["a"] == pytest.approx(pooled.std(), abs=1e-9)


def test_constant_channel():
    scenes = [_scene_with(np.ones((3, 3)), "c")]
    with pytest.raises(DegenerateChannel):
        compute_normalization(scenes, ["a"])
    assert compute_normalization(scenes, ["a"], exempt=["a"]).std["a"] == 1.0


def test_normalization_id_is_content_hash():
    a = NormalizationStats({"x": 1.0}, {"x": 2.0})
    b = NormalizationStats.from_json(a.to_json())
    assert a.normalization_id == b.normalization_id
    assert a.normalization_id != NormalizationStats({"x": 1.0}, {"x": 2.5}).normalization_id


def test_mask_and_normalize_land_policy():
    ids = np.zeros((2, 3), dtype=np.int32)
    land = np.array([[1, 0, 0], [0, 0, 0]], dtype=bool)
    vals = np.array([[9.0, 2.0, np.nan], [4.0, 4.0, 4.0]])
    s = make_scene(ids, [ice_polygon(0, 91)], {"a": vals}, land_mask=land)
    stats = NormalizationStats({"a": 2.0}, {"a": 2.0})
    ex = apply_mask_and_normalize(s, stats, "exclude", channels=["a", "month"])
    assert ex.features[0, 0, 0] == 0.0 and ex.labels[0, 0] == IGNORE
    assert ex.features[0, 0, 1] == 0.0 and ex.features[0, 1, 0] == 1.0
    assert ex.labels[0, 2] == IGNORE  # non-finite feature
    assert np.all(ex.features[1][~land] == np.float32(month_value(3)))
    inc = apply_mask_and_normalize(s, stats, "include", channels=["a"])
    assert inc.features[0, 0, 0] == 3.5
    with pytest.raises(MissingStats):
        apply_mask_and_normalize(s, NormalizationStats({}, {}), channels=["a"])


def test_prepare_scene_labels_come_from_original_grid():
    ids = np.zeros((4, 4), dtype=np.int32)
    ids[:, 3] = 1
    s = make_scene(ids, [ice_polygon(0, 0), ice_polygon(1, 95)], {"a": np.random.default_rng(0).normal(size=(4, 4))})
    st_ = prepare_scene(s, PrepConfig(channels=("a",), downscale_ratio=2))
    assert st_.labels.tolist() == [[0, 0], [0, 0]]
    assert st_.features.shape == (1, 2, 2)


def test_alignment_policy_override():
    pol = AlignmentPolicy({"b": "block_max"})
    assert pol.kernel_for("b", (8, 8), (4, 4)) == "block_max"
    assert pol.kernel_for("a", (8, 8), (4, 4)) == "block_average"
    assert pol.kernel_for("a", (2, 2), (4, 4)) == "nearest_replicate"
