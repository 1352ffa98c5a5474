import numpy as np
import pytest

from icebench.errors import AllNonFinite, CorruptPayload, NonFiniteLoss, UntrainedModel, VersionMismatch
from icebench.errors import SingleClassTrain
from icebench.refmodels import (
    PatchRefModel,
    PixelRefModel,
    RefModel,
    SoftmaxState,
    TrainConfig,
    cross_entropy,
    fit,
    loss_and_grad,
    patch_features,
    pixel_features,
    predict_classes,
    state_from_bytes,
    state_to_bytes,
)


def numeric_grad(W, b, X, y, eps=1e-6):
    gW = np.zeros_like(W)
    gb = np.zeros_like(b)
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


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, d, k = rng.integers(1, 20), rng.integers(1, 6), 6
    X = rng.normal(size=(n, d))
    y = rng.integers(0, k, size=n)
    W, b = rng.normal(size=(k, d)), rng.normal(size=k)
    loss, gW, gb = loss_and_grad(W, b, X, y)
    nW, nb = numeric_grad(W, b, X, y)
    assert loss == pytest.approx(cross_entropy(SoftmaxState(W, b), X, y))
    assert rel_err(gW, nW) < 1e-4 and rel_err(gb, nb) < 1e-4


def anti_correlated():
    X = np.array([[1.0], [-1.0]] * 4)
    return X, np.array([0, 1] * 4), X, np.array([1, 0] * 4)


@pytest.mark.parametrize("patience", [1, 3, 7])
def test_early_stop_after_patience_plus_one(patience):
    X, y, Xv, yv = anti_correlated()
    state, log = fit(X, y, Xv, yv, TrainConfig(learning_rate=0.5, batch_size=8, early_stop_patience=patience))
    vals = [r["val_loss"] for r in log]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert len(log) == patience + 1
    assert cross_entropy(state, Xv, yv) == min(vals)


def test_returned_state_is_best_logged():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 3))
    y = (X[:, 0] > 0).astype(int) + 2 * (X[:, 1] > 1)
    Xv = rng.normal(size=(60, 3))
    yv = (Xv[:, 0] > 0).astype(int) + 2 * (Xv[:, 1] > 1)
    cfg = TrainConfig(learning_rate=0.1, max_epochs=30, early_stop_patience=5, seed=3)
    state, log = fit(X, y, Xv, yv, cfg)
    assert cross_entropy(state, Xv, yv) == pytest.approx(min(r["val_loss"] for r in log), abs=1e-12)
    state2, log2 = fit(X, y, Xv, yv, cfg)
    assert state == state2 and [r["val_loss"] for r in log] == [r["val_loss"] for r in log2]


def test_tolerance_blocks_tiny_improvements():
    X, y, Xv, yv = anti_correlated()
    _, log = fit(X, y, X, y, TrainConfig(learning_rate=1e-9, early_stop_patience=2, tolerance=1.0))
    assert len(log) == 3


def test_single_class_constant_predictor():
    X = np.ones((5, 2))
    with pytest.warns(SingleClassTrain):
        state, log = fit(X, np.full(5, 3), X, np.full(5, 3))
    assert (predict_classes(state, np.random.default_rng(0).normal(size=(10, 2))) == 3).all()
    assert len(log) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss():
    X = np.array([[1e300], [-1e300]])
    with pytest.raises(NonFiniteLoss):
        fit(X, np.array([0, 1]), X, np.array([0, 1]), TrainConfig(learning_rate=1e10))


def test_argmax_ties_to_smaller_class():
    state = SoftmaxState(np.zeros((6, 1)), np.array([0, 1, 1, 0, 1, 0.0]))
    assert predict_classes(state, np.zeros((1, 1)))[0] == 1


def test_patch_features_skip_nan():
    w = np.array([[[1.0, 3.0], [np.nan, 5.0]]])
    assert patch_features(w).tolist() == pytest.approx([3.0, np.sqrt(8 / 3)])
    with pytest.raises(AllNonFinite):
        patch_features(np.full((1, 2, 2), np.nan))


def test_pixel_features_shape_and_local_mean():
    f = np.zeros((2, 3, 3))
    f[0, 1, 1] = 9.0
    X = pixel_features(f)
    assert X.shape == (9, 4)
    assert X[4, 0] == 9.0 and X[4, 2] == pytest.approx(1.0)


def test_serialization_roundtrip_and_corruption(tmp_path):
    rng = np.random.default_rng(1)
    state = SoftmaxState(rng.normal(size=(6, 4)), rng.normal(size=6))
    raw = state_to_bytes(state)
    assert raw[:4] == b"ICBM" and state_from_bytes(raw) == state
    flipped = bytearray(raw)
    flipped[20] ^= 1
    with pytest.raises(CorruptPayload):
        state_from_bytes(bytes(flipped))
    with pytest.raises(CorruptPayload):
        state_from_bytes(raw[:-1])
    bumped = bytearray(raw)
    bumped[4] = 9
    with pytest.raises(VersionMismatch):
        state_from_bytes(bytes(bumped))


def test_model_save_load(tmp_path):
    rng = np.random.default_rng(2)
    m = PatchRefModel(("a", "b"), SoftmaxState(rng.normal(size=(6, 4)), rng.normal(size=6)))
    m.save(tmp_path / "m.icbm")
    back = RefModel.load(tmp_path / "m.icbm")
    assert isinstance(back, PatchRefModel) and back.channels == ("a", "b") and back.state == m.state
    with pytest.raises(UntrainedModel):
        PixelRefModel(("a",)).predict_pixels(np.zeros((1, 2, 2)))


def test_patch_model_learns_means():
    rng = np.random.default_rng(0)
    windows = [rng.normal(loc=3 * (i % 3), size=(2, 5, 5)) for i in range(60)]
    labels = np.array([i % 3 for i in range(60)])
    m = PatchRefModel(("a", "b"))
    m.fit(windows[:45], labels[:45], windows[45:], labels[45:], TrainConfig(learning_rate=0.1, max_epochs=50))
    assert (m.predict_patches(windows[45:]) == labels[45:]).all()


def test_pixel_subsampling_is_keyed():
    rng = np.random.default_rng(0)
    crops = [(rng.normal(size=(1, 6, 6)), rng.integers(0, 3, size=(6, 6)).astype(np.uint8)) for _ in range(3)]
    X1, y1 = PixelRefModel.samples(crops, 10, seed=5)
    X2, y2 = PixelRefModel.samples(crops, 10, seed=5)
    assert X1.shape == (30, 2) and np.array_equal(X1, X2) and np.array_equal(y1, y2)
