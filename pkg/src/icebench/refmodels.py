"""Model contract and the two built-in linear softmax reference models.

Both reference models are multinomial logistic regressions trained with plain
mini-batch gradient descent; they differ only in how features are built:

* ``PatchRefModel``: per-channel mean and population std of a patch window.
* ``PixelRefModel``: per-pixel channel values plus 3x3 local channel means.

``fit`` keeps the weights with the lowest validation cross-entropy and stops
after ``early_stop_patience`` epochs without improvement.
"""
from __future__ import annotations

import json
import struct
import time
import warnings
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .chart_labels import IGNORE, N_CLASSES
from .errors import (
    AllNonFinite,
    ConfigError,
    CorruptPayload,
    NonFiniteLoss,
    SingleClassTrain,
    UntrainedModel,
    VersionMismatch,
)
from .rng import keyed_generator

MAGIC = b"ICBM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHI")
CONSTANT_LOGIT = 50.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 500
    early_stop_patience: int = 30
    epoch_steps: int = 500
    optimizer: str = "sgd"
    seed: int = 0
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.epoch_steps < 1:
            raise ConfigError("batch_size, max_epochs and epoch_steps must be >= 1")
        if self.optimizer != "sgd":
            raise ConfigError(f"only the plain 'sgd' optimizer is built in, got {self.optimizer!r}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SoftmaxState:
    weights: np.ndarray  # (n_classes, feature_dim)
    bias: np.ndarray  # (n_classes,)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def __eq__(self, other):
        return (isinstance(other, SoftmaxState)
                and self.weights.tobytes() == other.weights.tobytes()
                and self.bias.tobytes() == other.bias.tobytes()
                and self.weights.shape == other.weights.shape)

    @classmethod
    def zeros(cls, n_classes: int, feature_dim: int) -> "SoftmaxState":
        return cls(np.zeros((n_classes, feature_dim)), np.zeros(n_classes))


def logits(state: SoftmaxState, X: np.ndarray) -> np.ndarray:
    return X @ state.weights.T + state.bias


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(state: SoftmaxState, X: np.ndarray, y: np.ndarray) -> float:
    z = logits(state, X)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def loss_and_grad(weights: np.ndarray, bias: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient with respect to weights and bias."""
    state = SoftmaxState(weights, bias)
    p = softmax(logits(state, X))
    n = len(y)
    loss = float(-np.log(np.maximum(p[np.arange(n), y], 1e-300)).mean())
    p[np.arange(n), y] -= 1.0
    p /= n
    return loss, p.T @ X, p.sum(axis=0)


def fit(X_train: np.ndarray, y_train: np.ndarray, X_val: np.ndarray, y_val: np.ndarray,
        cfg: TrainConfig = TrainConfig(), n_classes: int = N_CLASSES) -> tuple[SoftmaxState, list[dict]]:
    """Mini-batch gradient descent with validation-loss model selection."""
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)
    if len(y_train) == 0 or len(y_val) == 0:
        raise ConfigError("fit needs at least one training and one validation sample")
    d = X_train.shape[1]
    present = np.unique(y_train)
    t0 = time.perf_counter()
    if present.size == 1:
        warnings.warn(f"training set holds only class {int(present[0])}; returning a constant predictor",
                      SingleClassTrain, stacklevel=2)
        bias = np.full(n_classes, -CONSTANT_LOGIT)
        bias[present[0]] = CONSTANT_LOGIT
        state = SoftmaxState(np.zeros((n_classes, d)), bias)
        log = [{"epoch": 1, "train_loss": cross_entropy(state, X_train, y_train),
                "val_loss": cross_entropy(state, X_val, y_val), "wall_seconds": time.perf_counter() - t0}]
        return state, log

    W = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    best_state, best_loss, stale = None, np.inf, 0
    log: list[dict] = []
    n = len(y_train)
    for epoch in range(1, cfg.max_epochs + 1):
        order = keyed_generator(cfg.seed, "fit-epoch", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, gW, gb = loss_and_grad(W, b, X_train[idx], y_train[idx])
            W -= cfg.learning_rate * gW
            b -= cfg.learning_rate * gb
        state = SoftmaxState(W.copy(), b.copy())
        train_loss = cross_entropy(state, X_train, y_train)
        val_loss = cross_entropy(state, X_val, y_val)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise NonFiniteLoss(f"epoch {epoch}: train_loss={train_loss}, val_loss={val_loss}")
        log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                    "wall_seconds": time.perf_counter() - t0})
        if val_loss < best_loss - cfg.tolerance:
            best_state, best_loss, stale = state, val_loss, 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    return best_state, log


def predict_classes(state: SoftmaxState, X: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the smaller class index."""
    return logits(state, np.asarray(X, dtype=np.float64)).argmax(axis=1)


# -- features ---------------------------------------------------------------------------

def patch_features(window: np.ndarray) -> np.ndarray:
    """[mean_0..mean_C-1, std_0..std_C-1] over the finite pixels of each channel."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 2:
        window = window[None]
    flat = window.reshape(window.shape[0], -1)
    finite = np.isfinite(flat)
    n = finite.sum(axis=1)
    if np.any(n == 0):
        bad = np.flatnonzero(n == 0).tolist()
        raise AllNonFinite(f"channels {bad} have no finite pixels in this window")
    clean = np.where(finite, flat, 0.0)
    mean = clean.sum(axis=1) / n
    var = np.where(finite, (flat - mean[:, None]) ** 2, 0.0).sum(axis=1) / n
    return np.concatenate([mean, np.sqrt(var)])


def pixel_features(stack: np.ndarray) -> np.ndarray:
    """(H*W, 2C) rows: channel values and 3x3 local means (edge-replicated).

    Non-finite values are read as 0 so every pixel gets a prediction.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None]
    clean = np.where(np.isfinite(stack), stack, 0.0)
    local = ndimage.uniform_filter(clean, size=(1, 3, 3), mode="nearest")
    C = clean.shape[0]
    return np.concatenate([clean.reshape(C, -1), local.reshape(C, -1)]).T


# -- serialization ----------------------------------------------------------------------

def state_to_bytes(state: SoftmaxState) -> bytes:
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, state.n_classes, state.feature_dim)
    body += np.ascontiguousarray(state.weights, dtype="<f8").tobytes()
    body += np.ascontiguousarray(state.bias, dtype="<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def state_from_bytes(raw: bytes) -> SoftmaxState:
    if len(raw) < _HEADER.size + 4:
        raise CorruptPayload(f"model payload is {len(raw)} bytes, too short for a header")
    magic, version, k, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptPayload(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version}, this build reads {FORMAT_VERSION}")
    expected = _HEADER.size + 8 * (k * d + k) + 4
    if len(raw) != expected:
        raise CorruptPayload(f"model payload is {len(raw)} bytes, expected {expected}")
    (crc,) = struct.unpack_from("<I", raw, expected - 4)
    if zlib.crc32(raw[: expected - 4]) != crc:
        raise CorruptPayload("model checksum mismatch")
    off = _HEADER.size
    W = np.frombuffer(raw, dtype="<f8", count=k * d, offset=off).reshape(k, d).astype(np.float64)
    b = np.frombuffer(raw, dtype="<f8", count=k, offset=off + 8 * k * d).astype(np.float64)
    return SoftmaxState(W, b)


def save_model(state: SoftmaxState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(state_to_bytes(state))
    return path


def load_model(path) -> SoftmaxState:
    return state_from_bytes(Path(path).read_bytes())


def write_training_log(log: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in log:
            fh.write(json.dumps(row) + "\n")
    return path


# -- models -----------------------------------------------------------------------------

class RefModel:
    """Shared plumbing: trained state, probabilities, persistence."""

    kind = ""

    def __init__(self, channels: Sequence[str], state: SoftmaxState | None = None):
        self.channels = tuple(channels)
        self.state = state
        self.log: list[dict] = []

    @property
    def feature_dim(self) -> int:
        return 2 * len(self.channels)

    def _require_state(self) -> SoftmaxState:
        if self.state is None:
            raise UntrainedModel(f"{type(self).__name__} has no trained state")
        return self.state

    def _fit_matrix(self, X_tr, y_tr, X_va, y_va, cfg: TrainConfig) -> list[dict]:
        self.state, self.log = fit(X_tr, y_tr, X_va, y_va, cfg)
        return self.log

    def save(self, path) -> Path:
        path = Path(path)
        save_model(self._require_state(), path)
        side = {"kind": self.kind, "channels": list(self.channels), "format_version": FORMAT_VERSION}
        with open(path.with_suffix(path.suffix + ".json"), "w", encoding="utf-8") as fh:
            json.dump(side, fh, indent=2)
        return path

    @staticmethod
    def load(path) -> "RefModel":
        path = Path(path)
        with open(path.with_suffix(path.suffix + ".json"), encoding="utf-8") as fh:
            side = json.load(fh)
        cls = {"patch": PatchRefModel, "pixel": PixelRefModel}.get(side.get("kind"))
        if cls is None:
            raise CorruptPayload(f"model sidecar names unknown kind {side.get('kind')!r}")
        state = load_model(path)
        if state.feature_dim != 2 * len(side["channels"]):
            raise CorruptPayload("model feature_dim does not match its channel list")
        return cls(side["channels"], state)


class PatchRefModel(RefModel):
    kind = "patch"

    @staticmethod
    def features(windows: Sequence[np.ndarray]) -> np.ndarray:
        return np.stack([patch_features(w) for w in windows]) if len(windows) else np.zeros((0, 0))

    def fit(self, train_windows, train_labels, val_windows, val_labels, cfg: TrainConfig = TrainConfig()) -> list[dict]:
        return self._fit_matrix(self.features(train_windows), train_labels,
                                self.features(val_windows), val_labels, cfg)

    def predict_proba(self, windows) -> np.ndarray:
        return softmax(logits(self._require_state(), self.features(windows)))

    def predict_patches(self, windows) -> np.ndarray:
        return predict_classes(self._require_state(), self.features(windows)).astype(np.uint8)

    def predict_patch(self, window: np.ndarray) -> int:
        return int(self.predict_patches([window])[0])


class PixelRefModel(RefModel):
    kind = "pixel"

    @staticmethod
    def samples(crops, pixels_per_crop: int | None = None, seed: int = 0):
        """Stack labeled pixels of (features, labels) crops into (X, y).

        With ``pixels_per_crop`` each crop contributes at most that many
        pixels, drawn by a generator keyed on the crop's position in ``crops``.
        """
        Xs, ys = [], []
        for i, (feat, lab) in enumerate(crops):
            X = pixel_features(feat)
            y = np.asarray(lab).ravel()
            keep = np.flatnonzero(y != IGNORE)
            if pixels_per_crop is not None and keep.size > pixels_per_crop:
                keep = np.sort(keyed_generator(seed, "pixel-subsample", i).choice(keep, pixels_per_crop, replace=False))
            Xs.append(X[keep])
            ys.append(y[keep].astype(np.int64))
        if not Xs:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return np.concatenate(Xs), np.concatenate(ys)

    def fit(self, train_crops, val_crops, cfg: TrainConfig = TrainConfig(), pixels_per_crop: int | None = None) -> list[dict]:
        X_tr, y_tr = self.samples(train_crops, pixels_per_crop, cfg.seed)
        X_va, y_va = self.samples(val_crops, pixels_per_crop, cfg.seed + 1)
        return self._fit_matrix(X_tr, y_tr, X_va, y_va, cfg)

    def predict_pixels(self, stack: np.ndarray) -> np.ndarray:
        state = self._require_state()
        stack = np.asarray(stack)
        if stack.ndim == 2:
            stack = stack[None]
        H, W = stack.shape[-2:]
        return predict_classes(state, pixel_features(stack)).reshape(H, W).astype(np.uint8)
