"""Training samples: pure labeled patches, random crops, and augmentation."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .chart_labels import IGNORE, N_CLASSES, LabelingConfig
from .errors import ConfigError, SceneTooSmall
from .preprocess import FeatureStack, PrepConfig, prepare_scene
from .rng import keyed_generator
from .scene_store import DatasetManifest, load_scene

MAX_REDRAWS = 16


@dataclass(frozen=True)
class SamplingConfig:
    mode: str = "patch"
    patch_size: int | None = None  # 224 for patch mode, 256 for crop mode
    stride: int = 100
    purity: float = 1.0
    border_distance: int = 0
    border_metric: str = "chebyshev"
    allow_land: bool = False
    reject_nonfinite: bool = True
    seed: int = 0
    epoch_steps: int = 500

    def __post_init__(self):
        if self.mode not in ("patch", "crop"):
            raise ConfigError(f"sampling mode must be 'patch' or 'crop', got {self.mode!r}")
        if self.patch_size is None:
            object.__setattr__(self, "patch_size", 224 if self.mode == "patch" else 256)
        if self.patch_size < 1 or self.stride < 1:
            raise ConfigError("patch_size and stride must be >= 1")
        if not 0.5 < self.purity <= 1.0:
            raise ConfigError(f"purity must be in (0.5, 1.0], got {self.purity}")
        if self.border_distance < 0:
            raise ConfigError("border_distance must be >= 0")
        if self.border_metric not in ("chebyshev", "euclidean"):
            raise ConfigError(f"border_metric must be 'chebyshev' or 'euclidean', got {self.border_metric!r}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PatchRecord:
    scene_id: str
    row: int
    col: int
    size: int
    label: int

    def to_json(self) -> dict:
        return {"scene_id": self.scene_id, "row": self.row, "col": self.col, "size": self.size, "label": self.label}

    def window(self, arr: np.ndarray) -> np.ndarray:
        return arr[..., self.row:self.row + self.size, self.col:self.col + self.size]


@dataclass(frozen=True)
class AugmentationConfig:
    enabled: bool = True
    rotation_max_deg: float = 10.0
    vertical_flip: bool = True

    def __post_init__(self):
        if not 0 <= self.rotation_max_deg <= 45:
            raise ConfigError(f"rotation_max_deg must be in [0, 45], got {self.rotation_max_deg}")


def candidate_origins(dim: int, size: int, stride: int) -> np.ndarray:
    """Grid origins along one axis whose window fits inside ``dim``."""
    if dim < size:
        return np.zeros(0, dtype=np.intp)
    return np.arange(0, dim - size + 1, stride, dtype=np.intp)


def _sat(mask: np.ndarray) -> np.ndarray:
    out = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(mask, axis=0, dtype=np.int64), axis=1, out=out[1:, 1:])
    return out


def _box(sat: np.ndarray, r0, c0, r1, c1) -> np.ndarray:
    """Sum over [r0, r1) x [c0, c1) for broadcastable index arrays."""
    return sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]


def extract_patches(stack: FeatureStack, cfg: SamplingConfig) -> list[PatchRecord]:
    """Accepted patch windows of one prepared scene, in row-major origin order."""
    if cfg.mode != "patch":
        raise ConfigError("extract_patches requires mode='patch'")
    labels = stack.labels
    H, W = labels.shape
    s = cfg.patch_size
    rows = candidate_origins(H, s, cfg.stride)
    cols = candidate_origins(W, s, cfg.stride)
    if rows.size == 0 or cols.size == 0:
        return []
    R, C = np.meshgrid(rows, cols, indexing="ij")
    R1, C1 = R + s, C + s

    counts = np.stack([_box(_sat(labels == k), R, C, R1, C1) for k in range(N_CLASSES)])
    valid = counts.sum(axis=0)
    best = counts.argmax(axis=0)
    best_count = np.take_along_axis(counts, best[None], axis=0)[0]
    ok = (valid > 0) & (best_count >= cfg.purity * valid - 1e-9)
    if not cfg.allow_land:
        ok &= _box(_sat(stack.land), R, C, R1, C1) == 0
    if cfg.reject_nonfinite:
        ok &= _box(_sat(~np.isfinite(stack.features).all(axis=0)), R, C, R1, C1) == 0

    d = cfg.border_distance
    if d > 0:
        if cfg.border_metric == "chebyshev":
            labeled = _sat(labels != IGNORE)
            r0, c0 = np.maximum(R - d, 0), np.maximum(C - d, 0)
            r1, c1 = np.minimum(R1 + d, H), np.minimum(C1 + d, W)
            near_total = _box(labeled, r0, c0, r1, c1)
            near_same = np.zeros_like(near_total)
            for k in range(N_CLASSES):
                sel = best == k
                if sel.any():
                    near_same[sel] = _box(_sat(labels == k), r0[sel], c0[sel], r1[sel], c1[sel])
            ok &= near_total == near_same
        else:
            for k in np.unique(best[ok]):
                other = (labels != IGNORE) & (labels != k)
                if not other.any():
                    continue
                dist = ndimage.distance_transform_edt(~other)
                near = _sat(dist <= d)
                sel = ok & (best == k)
                ok[sel] &= _box(near, R[sel], C[sel], R1[sel], C1[sel]) == 0

    return [
        PatchRecord(stack.scene_id, int(R[i, j]), int(C[i, j]), s, int(best[i, j]))
        for i, j in zip(*np.nonzero(ok))
    ]


def patch_candidate_count(height: int, width: int, size: int, stride: int) -> int:
    return len(candidate_origins(height, size, stride)) * len(candidate_origins(width, size, stride))


# -- random crops -----------------------------------------------------------------

def crop_origin(seed: int, scene_id: str, step_index: int, attempt: int, n_rows: int, n_cols: int) -> tuple[int, int]:
    """Uniform origin among ``n_rows * n_cols`` valid origins, keyed by identity."""
    g = keyed_generator(seed, scene_id, step_index, attempt)
    idx = int(g.integers(0, n_rows * n_cols))
    return divmod(idx, n_cols)


@dataclass(frozen=True, eq=False)
class Crop:
    scene_id: str
    row: int
    col: int
    features: np.ndarray
    labels: np.ndarray


def random_crop(stack: FeatureStack, cfg: SamplingConfig, step_index: int) -> Crop | None:
    """Deterministic random crop; ``None`` when every redraw was all-ignore."""
    s = cfg.patch_size
    H, W = stack.shape
    if H < s or W < s:
        raise SceneTooSmall(f"scene {stack.scene_id} is {H}x{W}, crop size {s}")
    n_rows, n_cols = H - s + 1, W - s + 1
    for attempt in range(MAX_REDRAWS + 1):
        r, c = crop_origin(cfg.seed, stack.scene_id, step_index, attempt, n_rows, n_cols)
        lab = stack.labels[r:r + s, c:c + s]
        if (lab != IGNORE).any():
            return Crop(stack.scene_id, r, c, stack.features[:, r:r + s, c:c + s], lab)
    return None


# -- augmentation -------------------------------------------------------------------

def augment(features: np.ndarray, target, cfg: AugmentationConfig, rng_key):
    """Randomly flip rows and rotate a square window.

    ``features`` is (C, n, n) or (n, n).  ``target`` is either an integer
    patch class (returned unchanged) or an (n, n) label raster transformed
    alongside the features.  Features use bilinear resampling with NaN fill;
    labels use nearest-neighbour with 255 fill.
    """
    if not cfg.enabled:
        return features, target
    if features.shape[-1] != features.shape[-2]:
        raise ConfigError(f"augment needs square windows, got {features.shape[-2:]}")
    keys = rng_key if isinstance(rng_key, tuple) else (rng_key,)
    g = keyed_generator("augment", *keys)
    flip = bool(g.random() < 0.5) and cfg.vertical_flip
    angle = float(g.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)) if cfg.rotation_max_deg > 0 else 0.0
    raster_target = isinstance(target, np.ndarray) and target.ndim == 2

    out = np.asarray(features)
    lab = target
    if flip:
        out = out[..., ::-1, :]
        if raster_target:
            lab = lab[::-1, :]
    if angle != 0.0:
        axes = (out.ndim - 1, out.ndim - 2)
        out = ndimage.rotate(out.astype(np.float32), angle, axes=axes, reshape=False, order=1,
                             mode="constant", cval=np.nan, prefilter=False)
        if raster_target:
            lab = ndimage.rotate(lab, angle, reshape=False, order=0, mode="constant", cval=IGNORE)
    out = np.ascontiguousarray(out)
    if raster_target:
        lab = np.ascontiguousarray(lab)
    return out, lab


# -- dataset building -------------------------------------------------------------------

def _scene_records(args) -> list[PatchRecord]:
    path, label_cfg, sampling_cfg, prep = args
    return extract_patches(prepare_scene(load_scene(path), prep, label_cfg), sampling_cfg)


def collect_patch_records(scene_paths: Sequence[str], label_cfg: LabelingConfig, sampling_cfg: SamplingConfig,
                          prep: PrepConfig = PrepConfig(), workers: int = 1) -> list[PatchRecord]:
    """Extract patches for every scene; output order follows ``scene_paths``."""
    jobs = [(str(p), label_cfg, sampling_cfg, prep) for p in scene_paths]
    if workers <= 1:
        per_scene = [_scene_records(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            per_scene = list(ex.map(_scene_records, jobs))
    return [r for recs in per_scene for r in recs]


def class_counts(records: Sequence[PatchRecord]) -> list[int]:
    return np.bincount([r.label for r in records], minlength=N_CLASSES).astype(int).tolist()


def write_jsonl(records: Sequence[PatchRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")
    return path


def read_jsonl(path) -> list[PatchRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PatchRecord(**json.loads(line)) for line in fh if line.strip()]


def summary_path(out_path) -> Path:
    p = Path(out_path)
    return p.with_name(p.stem + ".summary.json")


def build_patch_dataset(manifest: DatasetManifest | Sequence[str], label_cfg: LabelingConfig,
                        sampling_cfg: SamplingConfig, out_path, prep: PrepConfig = PrepConfig(),
                        workers: int = 1) -> dict:
    """Write the patch JSONL for a manifest and return ``{n_samples, class_counts}``."""
    records = collect_patch_records(list(manifest), label_cfg, sampling_cfg, prep, workers)
    write_jsonl(records, out_path)
    summary = {"n_samples": len(records), "class_counts": class_counts(records)}
    with open(summary_path(out_path), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return summary
