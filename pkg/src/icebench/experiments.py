"""Config-driven experiment runner.

A *cell* trains one reference model on a training pool and scores it on a
test pool.  Higher-level studies (transferability matrices, sweeps,
preparation ablations) are collections of cells that share a seed and differ
in exactly the configured axis.  Every cell echoes the config that produced
it, so any row of a report can be re-run on its own.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .chart_labels import IGNORE, N_CLASSES, LabelingConfig, rasterize_labels
from .errors import ConfigError, IceBenchError, InsufficientScenes, SceneTooSmall
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    ResourceMonitor,
    confusion,
    efficiency_report,
    f1_w,
    metrics_report,
    per_class,
)
from .partition import PartitionContext, SEASONS, CRYO_SEASONS, REGIONS, filter_scenes, make_splits
from .preprocess import (
    FeatureStack,
    NormalizationStats,
    PrepConfig,
    apply_mask_and_normalize,
    compute_normalization,
    downscale_labels,
    downscale_scene,
    MONTH_CHANNEL,
)
from .refmodels import PatchRefModel, PixelRefModel, RefModel, TrainConfig
from .rng import keyed_generator
from .sampling import (
    AugmentationConfig,
    PatchRecord,
    SamplingConfig,
    augment,
    candidate_origins,
    extract_patches,
    random_crop,
)
from .scene_store import read_scene_meta, load_scene

log = logging.getLogger(__name__)

DEFAULT_CHANNELS = (
    "nersc_sar_primary",
    "nersc_sar_secondary",
    "sar_incidence_angle",
    "distance_map",
    "btemp_18_7v",
    "btemp_36_5v",
    "month",
)


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PipelineConfig:
    """Data preparation, sampling and training settings for one cell."""

    paradigm: str = "patch"
    labeling: LabelingConfig = field(default_factory=LabelingConfig)
    prep: PrepConfig = field(default_factory=lambda: PrepConfig(channels=DEFAULT_CHANNELS))
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    augmentation: AugmentationConfig = field(default_factory=lambda: AugmentationConfig(enabled=False))
    train: TrainConfig = field(default_factory=TrainConfig)
    holdout: Mapping = field(default_factory=lambda: {"fraction": 0.1})
    pixels_per_crop: int | None = 256
    pixel_sampling: str = "crop"
    data_size: int | None = None
    exempt_degenerate: bool = False
    seed: int = 0
    monitor_interval_ms: int = 1000

    def __post_init__(self):
        if self.paradigm not in ("patch", "pixel"):
            raise ConfigError(f"paradigm must be 'patch' or 'pixel', got {self.paradigm!r}")
        if self.pixel_sampling not in ("crop", "grid"):
            raise ConfigError(f"pixel_sampling must be 'crop' or 'grid', got {self.pixel_sampling!r}")
        if self.data_size is not None and self.data_size < 1:
            raise ConfigError("data_size must be >= 1")
        if self.sampling.mode != self.sampling_mode:
            raise ConfigError(f"{self.paradigm} paradigm needs sampling mode {self.sampling_mode!r}")

    @property
    def sampling_mode(self) -> str:
        return "patch" if self.paradigm == "patch" else "crop"

    @property
    def channels(self) -> tuple[str, ...]:
        return self.prep.channels or DEFAULT_CHANNELS

    def to_json(self) -> dict:
        return {
            "paradigm": self.paradigm,
            "labeling": asdict(self.labeling),
            "prep": self.prep.to_json(),
            "sampling": self.sampling.to_json(),
            "augmentation": asdict(self.augmentation),
            "train": self.train.to_json(),
            "holdout": dict(self.holdout),
            "pixels_per_crop": self.pixels_per_crop,
            "pixel_sampling": self.pixel_sampling,
            "data_size": self.data_size,
            "exempt_degenerate": self.exempt_degenerate,
            "seed": self.seed,
            "monitor_interval_ms": self.monitor_interval_ms,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "PipelineConfig":
        d = dict(d)
        kw = {}
        mode = "crop" if d.get("paradigm") == "pixel" else "patch"
        d["sampling"] = {"mode": mode, **d.get("sampling", {})}
        if "labeling" in d:
            kw["labeling"] = LabelingConfig(**d.pop("labeling"))
        if "prep" in d:
            prep = dict(d.pop("prep"))
            prep.setdefault("channels", list(DEFAULT_CHANNELS))
            kw["prep"] = PrepConfig.from_json(prep)
        if "sampling" in d:
            kw["sampling"] = SamplingConfig(**d.pop("sampling"))
        if "augmentation" in d:
            kw["augmentation"] = AugmentationConfig(**d.pop("augmentation"))
        if "train" in d:
            kw["train"] = TrainConfig(**d.pop("train"))
        kw.update(d)
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(f"bad pipeline config: {exc}") from None

    def with_changes(self, **changes) -> "PipelineConfig":
        return replace(self, **changes)

    def stage_hashes(self) -> dict[str, str]:
        j = self.to_json()
        return {
            "prepare": _hash({"labeling": j["labeling"], "prep": j["prep"]}),
            "sampling": _hash({k: j[k] for k in ("sampling", "augmentation", "pixels_per_crop", "pixel_sampling", "data_size")}),
            "train": _hash({k: j[k] for k in ("paradigm", "train", "holdout", "seed", "exempt_degenerate")}),
        }


# -- data preparation ------------------------------------------------------------------------

class SceneCache:
    """Downscaled scenes and labels keyed by (path, prepare-stage settings)."""

    def __init__(self):
        self._items: dict = {}

    def get(self, path: str, cfg: PipelineConfig):
        key = (str(path), _hash({"labeling": asdict(cfg.labeling), "prep": cfg.prep.to_json()}))
        if key not in self._items:
            scene = load_scene(path)
            labels = downscale_labels(rasterize_labels(scene, cfg.labeling, cfg.prep.land_zones),
                                      cfg.prep.downscale_ratio)
            prepared = downscale_scene(scene, cfg.prep.downscale_ratio, cfg.prep.alignment, cfg.prep.land_zones)
            self._items[key] = (prepared, labels)
        return self._items[key]


def fit_stats(paths: Sequence[str], cfg: PipelineConfig, cache: SceneCache) -> NormalizationStats:
    names = [c for c in cfg.channels if c != MONTH_CHANNEL]
    scenes = [cache.get(p, cfg)[0] for p in paths]
    return compute_normalization(scenes, names, exempt=names if cfg.exempt_degenerate else ())


def build_stacks(paths: Sequence[str], cfg: PipelineConfig, stats: NormalizationStats,
                 cache: SceneCache) -> list[FeatureStack]:
    out = []
    for p in paths:
        scene, labels = cache.get(p, cfg)
        out.append(apply_mask_and_normalize(scene, stats, cfg.prep.land_policy, labels=labels,
                                            channels=cfg.channels, land_zones=cfg.prep.land_zones))
    return out


def nested_subset(n_total: int, n: int | None, seed: int) -> np.ndarray:
    """First ``n`` indices of a fixed seeded permutation, sorted; nested in ``n``."""
    if n is None or n >= n_total:
        return np.arange(n_total)
    return np.sort(keyed_generator(seed, "data-size").permutation(n_total)[:n])


def patch_records(stacks: Sequence[FeatureStack], sampling: SamplingConfig) -> list[PatchRecord]:
    return [r for s in stacks for r in extract_patches(s, sampling)]


def patch_samples(stacks: Sequence[FeatureStack], cfg: PipelineConfig, training: bool):
    """Windows and class labels for the patch paradigm (augmented when training)."""
    by_id = {s.scene_id: s for s in stacks}
    sampling = cfg.sampling if training else replace(cfg.sampling, border_distance=0)
    records = patch_records(stacks, sampling)
    if training:
        records = [records[i] for i in nested_subset(len(records), cfg.data_size, cfg.seed)]
    windows, labels = [], []
    for r in records:
        w = r.window(by_id[r.scene_id].features)
        if training and cfg.augmentation.enabled:
            w, _ = augment(w, r.label, cfg.augmentation, (cfg.seed, r.scene_id, r.row, r.col))
        windows.append(w)
        labels.append(r.label)
    return records, windows, np.asarray(labels, dtype=np.int64)


def pixel_windows(stacks: Sequence[FeatureStack], cfg: PipelineConfig, training: bool):
    """(features, labels) windows for the pixel paradigm.

    Training uses ``epoch_steps`` random crops cycled over scenes, or grid
    windows when ``pixel_sampling == "grid"``; validation uses whole scenes.
    """
    if not training:
        return [(s.features, s.labels) for s in stacks]
    s = cfg.sampling.patch_size
    crops = []
    if cfg.pixel_sampling == "grid":
        for st in stacks:
            H, W = st.shape
            for r in candidate_origins(H, s, cfg.sampling.stride):
                for c in candidate_origins(W, s, cfg.sampling.stride):
                    lab = st.labels[r:r + s, c:c + s]
                    if (lab != IGNORE).any():
                        crops.append((st.features[:, r:r + s, c:c + s], lab))
        crops = [crops[i] for i in nested_subset(len(crops), cfg.data_size, cfg.seed)]
    else:
        usable = [st for st in stacks if min(st.shape) >= s]
        if not usable:
            raise SceneTooSmall(f"no training scene fits crop size {s}")
        steps = cfg.data_size or cfg.sampling.epoch_steps
        sampling = replace(cfg.sampling, seed=cfg.seed)
        for step in range(steps):
            crop = random_crop(usable[step % len(usable)], sampling, step)
            if crop is not None:
                crops.append((crop.features, crop.labels))
    if cfg.augmentation.enabled:
        crops = [augment(f, l, cfg.augmentation, (cfg.seed, "crop", i)) for i, (f, l) in enumerate(crops)]
    return crops


# -- training and evaluation -----------------------------------------------------------------

@dataclass
class TrainedModel:
    model: RefModel
    stats: NormalizationStats
    config: PipelineConfig
    n_train_samples: int
    train_sample_hash: str
    log: list
    training_summary: object = None


def train_on_stacks(cfg: PipelineConfig, train_stacks, val_stacks) -> TrainedModel:
    """Fit the configured reference model; raises when a split yields no samples."""
    tcfg = replace(cfg.train, seed=cfg.seed)
    channels = cfg.channels
    with ResourceMonitor("training", cfg.monitor_interval_ms) as mon:
        if cfg.paradigm == "patch":
            recs, windows, labels = patch_samples(train_stacks, cfg, training=True)
            _, vwin, vlab = patch_samples(val_stacks, cfg, training=False)
            if not windows:
                raise InsufficientScenes("no training patches pass the sampling filters")
            if not vwin:
                vwin, vlab = windows, labels
                log.warning("validation split yields no patches; validating on training patches")
            model = PatchRefModel(channels)
            model.fit(windows, labels, vwin, vlab, tcfg)
            n, h = len(windows), _hash([r.to_json() for r in recs])
        else:
            crops = pixel_windows(train_stacks, cfg, training=True)
            vcrops = pixel_windows(val_stacks, cfg, training=False)
            if not crops:
                raise InsufficientScenes("no training crops hold labeled pixels")
            model = PixelRefModel(channels)
            model.fit(crops, vcrops, tcfg, cfg.pixels_per_crop)
            n = len(crops)
            h = _hash([hashlib.sha256(np.ascontiguousarray(l).tobytes()).hexdigest() for _, l in crops])
    return TrainedModel(model, None, cfg, n, h, model.log, mon.summary)


def predict_scene(model: RefModel, stack: FeatureStack, patch_size: int | None = None,
                  tiling: str = "clamped") -> np.ndarray:
    """Per-pixel class raster for a scene from either model kind."""
    if isinstance(model, PixelRefModel):
        return model.predict_pixels(stack.features)
    if patch_size is None:
        raise ConfigError("patch_size is required to map patch predictions to pixels")
    return tile_patch_predictions(model, stack, patch_size, tiling)


def tile_origins(dim: int, size: int) -> list[int]:
    """Non-overlapping origins; the last window is clamped to the edge."""
    if dim < size:
        raise SceneTooSmall(f"dimension {dim} is smaller than patch size {size}")
    origins = list(range(0, dim - size + 1, size))
    if origins[-1] + size < dim:
        origins.append(dim - size)
    return origins


def tile_patch_predictions(model: PatchRefModel, stack: FeatureStack, size: int, tiling: str = "clamped") -> np.ndarray:
    """Fill each tile with the patch model's class.

    ``clamped``: later tiles overwrite the overlap left by the clamped last
    tile.  ``overlap_average``: class probabilities are averaged over all
    tiles covering a pixel, then arg-maxed.
    """
    H, W = stack.shape
    rows, cols = tile_origins(H, size), tile_origins(W, size)
    windows = [stack.features[:, r:r + size, c:c + size] for r in rows for c in cols]
    origins = [(r, c) for r in rows for c in cols]
    if tiling == "clamped":
        preds = model.predict_patches(windows)
        out = np.empty((H, W), dtype=np.uint8)
        for (r, c), k in zip(origins, preds):
            out[r:r + size, c:c + size] = k
        return out
    if tiling == "overlap_average":
        proba = model.predict_proba(windows)
        acc = np.zeros((N_CLASSES, H, W))
        for (r, c), p in zip(origins, proba):
            acc[:, r:r + size, c:c + size] += p[:, None, None]
        return acc.argmax(axis=0).astype(np.uint8)
    raise ConfigError(f"tiling must be 'clamped' or 'overlap_average', got {tiling!r}")


def evaluate_trained(trained: TrainedModel, test_stacks) -> tuple[MetricsReport, object]:
    """Patch models are scored on single-label test patches, pixel models on whole scenes."""
    cfg = trained.config
    with ResourceMonitor("inference", cfg.monitor_interval_ms) as mon:
        if cfg.paradigm == "patch":
            _, windows, labels = patch_samples(test_stacks, cfg, training=False)
            if not windows:
                raise InsufficientScenes("test scenes yield no patches")
            cm = confusion(labels, trained.model.predict_patches(windows))
        else:
            cm = ConfusionMatrix(np.zeros((N_CLASSES, N_CLASSES + 1), dtype=np.int64))
            for st in test_stacks:
                cm = cm + confusion(st.labels, trained.model.predict_pixels(st.features))
    return metrics_report(cm), mon.summary


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path, "manifest.json").read_bytes()).hexdigest()[:16]


def split_train_val(train_paths, cfg: PipelineConfig, val_paths=None, filters=None,
                    ctx: PartitionContext = PartitionContext()):
    if val_paths:
        train = [m.path for m in filter_scenes([read_scene_meta(p) for p in train_paths], filters, ctx)]
        return train, list(val_paths)
    tr, va = make_splits(list(train_paths), filters, cfg.holdout, cfg.seed, ctx)
    return list(tr.scenes), list(va.scenes)


def fit_cell(cfg: PipelineConfig, train_paths, val_paths, cache: SceneCache | None = None) -> TrainedModel:
    cache = cache or SceneCache()
    stats = fit_stats(train_paths, cfg, cache)
    trained = train_on_stacks(cfg, build_stacks(train_paths, cfg, stats, cache), build_stacks(val_paths, cfg, stats, cache))
    trained.stats = stats
    return trained


def score_cell(trained: TrainedModel, test_paths, cache: SceneCache | None = None, extra: Mapping | None = None) -> dict:
    cache = cache or SceneCache()
    cfg = trained.config
    report, inf = evaluate_trained(trained, build_stacks(test_paths, cfg, trained.stats, cache))
    eff = efficiency_report(trained.training_summary, inf, epochs=len(trained.log))
    return {
        **(extra or {}),
        "status": "ok",
        "metrics": report.to_json(),
        "efficiency": eff.to_json(),
        "config": cfg.to_json(),
        "provenance": {
            "seed": cfg.seed,
            "stage_hashes": cfg.stage_hashes(),
            "test_scenes": [read_scene_meta(p).scene_id for p in test_paths],
            "file_hashes": {read_scene_meta(p).scene_id: _file_hash(p) for p in test_paths},
            "n_train_samples": trained.n_train_samples,
            "train_sample_hash": trained.train_sample_hash,
            "epochs": len(trained.log),
            "best_val_loss": min(r["val_loss"] for r in trained.log),
        },
    }


def run_cell(cfg: PipelineConfig, train_paths, test_paths, val_paths=None, filters=None, test_filters=None,
             ctx: PartitionContext = PartitionContext(), cache: SceneCache | None = None,
             extra: Mapping | None = None) -> dict:
    """Split, train and score one cell; failures become ``status: error`` rows."""
    cache = cache or SceneCache()
    try:
        tr, va = split_train_val(train_paths, cfg, val_paths, filters, ctx)
        te = [m.path for m in filter_scenes([read_scene_meta(p) for p in test_paths], test_filters, ctx)]
        if not te:
            raise InsufficientScenes(f"test filters {test_filters} leave no scenes")
        trained = fit_cell(cfg, tr, va, cache)
        cell = score_cell(trained, te, cache, extra)
        cell["provenance"]["train_scenes"] = [read_scene_meta(p).scene_id for p in tr]
        cell["provenance"]["validation_scenes"] = [read_scene_meta(p).scene_id for p in va]
        cell["provenance"]["file_hashes"].update({read_scene_meta(p).scene_id: _file_hash(p) for p in tr + va})
        return cell
    except IceBenchError as exc:
        return {**(extra or {}), "status": "error", "message": str(exc), "config": cfg.to_json()}


# -- studies ----------------------------------------------------------------------------------

def _key_order(kind: str, keys) -> list[str]:
    canon = {"season": SEASONS, "cryo": CRYO_SEASONS, "region": REGIONS}.get(kind, ())
    keys = set(keys)
    return [k for k in canon if k in keys] + sorted(keys - set(canon))


def run_transferability(cfg: PipelineConfig, train_paths, test_paths, kind: str,
                        ctx: PartitionContext = PartitionContext(), train_keys=None, test_keys=None,
                        composite_rows: Sequence[str] = ("All", "Baseline")) -> dict:
    """Train one model per partition key and score it on every test partition.

    ``All`` trains on the union of the listed train keys; ``Baseline`` on the
    whole unfiltered training manifest.  Rows or cells whose partitions are
    too small are marked ``skipped`` and the rest of the matrix proceeds.
    """
    keyfn = ctx.key(kind)
    tr_meta = [read_scene_meta(p) for p in train_paths]
    te_meta = [read_scene_meta(p) for p in test_paths]
    tr_groups: dict[str, list[str]] = {}
    for m in tr_meta:
        tr_groups.setdefault(keyfn(m), []).append(m.path)
    te_groups: dict[str, list[str]] = {}
    for m in te_meta:
        te_groups.setdefault(keyfn(m), []).append(m.path)
    train_keys = list(train_keys) if train_keys is not None else _key_order(kind, tr_groups)
    test_keys = list(test_keys) if test_keys is not None else _key_order(kind, te_groups)

    rows: list[tuple[str, list[str]]] = [(k, tr_groups.get(k, [])) for k in train_keys]
    if "All" in composite_rows:
        rows.append(("All", [p for k in train_keys for p in tr_groups.get(k, [])]))
    if "Baseline" in composite_rows:
        rows.append(("Baseline", [m.path for m in tr_meta]))

    cache = SceneCache()
    cells = []
    for row_key, pool in rows:
        base = {"train_key": row_key}
        try:
            tr, va = split_train_val(pool, cfg)
            trained = fit_cell(cfg, tr, va, cache)
        except InsufficientScenes as exc:
            cells += [{**base, "test_key": t, "status": "skipped", "message": str(exc)} for t in test_keys]
            continue
        except IceBenchError as exc:
            cells += [{**base, "test_key": t, "status": "error", "message": str(exc)} for t in test_keys]
            continue
        for t in test_keys:
            extra = {**base, "test_key": t}
            if not te_groups.get(t):
                cells.append({**extra, "status": "skipped", "message": f"test partition {t!r} is empty"})
                continue
            try:
                cells.append(score_cell(trained, te_groups[t], cache, extra))
            except InsufficientScenes as exc:
                cells.append({**extra, "status": "skipped", "message": str(exc)})
            except IceBenchError as exc:
                cells.append({**extra, "status": "error", "message": str(exc)})
    return {"experiment": "transfer", "kind": kind, "train_keys": [r for r, _ in rows], "test_keys": test_keys,
            "config": cfg.to_json(), "cells": cells}


SWEEP_AXES = ("downscale", "patch_size", "data_size")


def sweep_config(cfg: PipelineConfig, axis: str, value) -> PipelineConfig:
    if axis == "downscale":
        return cfg.with_changes(prep=replace(cfg.prep, downscale_ratio=int(value)))
    if axis == "patch_size":
        return cfg.with_changes(sampling=replace(cfg.sampling, patch_size=int(value)))
    if axis == "data_size":
        changes = {"data_size": int(value)}
        if cfg.paradigm == "pixel":
            changes["pixel_sampling"] = "grid"
        return cfg.with_changes(**changes)
    raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")


def run_sweep(axis: str, values: Sequence, cfg: PipelineConfig, train_paths, test_paths, val_paths=None,
              ctx: PartitionContext = PartitionContext()) -> dict:
    """Re-run the pipeline once per value with everything else fixed."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    tr, va = split_train_val(train_paths, cfg, val_paths, ctx=ctx)
    cache = SceneCache()
    cells = []
    for v in values:
        extra = {"axis": axis, "value": v}
        try:
            vcfg = sweep_config(cfg, axis, v)
        except IceBenchError as exc:
            cells.append({**extra, "status": "error", "message": str(exc)})
            continue
        cells.append(run_cell(vcfg, tr, test_paths, va, ctx=ctx, cache=cache, extra=extra))
    return {"experiment": "sweep", "axis": axis, "values": list(values), "config": cfg.to_json(), "cells": cells}


DEFAULT_ABLATION_ROWS = (
    {"augmentation": False, "include_land": False, "border_distance": 0},
    {"augmentation": True, "include_land": False, "border_distance": 0},
    {"augmentation": False, "include_land": True, "border_distance": 0},
    {"augmentation": False, "include_land": False, "border_distance": 20},
)


def ablation_config(cfg: PipelineConfig, toggles: Mapping) -> PipelineConfig:
    aug = replace(cfg.augmentation, enabled=bool(toggles.get("augmentation", cfg.augmentation.enabled)))
    include = bool(toggles.get("include_land", cfg.prep.land_policy == "include"))
    prep = replace(cfg.prep, land_policy="include" if include else "exclude")
    sampling = replace(cfg.sampling, allow_land=include,
                       border_distance=int(toggles.get("border_distance", cfg.sampling.border_distance)))
    return cfg.with_changes(augmentation=aug, prep=prep, sampling=sampling)


def run_preparation_ablation(cfg: PipelineConfig, train_paths, test_paths, rows: Sequence[Mapping] = DEFAULT_ABLATION_ROWS,
                             val_paths=None, ctx: PartitionContext = PartitionContext()) -> dict:
    """One cell per toggle combination, all on the same split and seed."""
    tr, va = split_train_val(train_paths, cfg, val_paths, ctx=ctx)
    cache = SceneCache()
    cells = []
    for toggles in rows:
        extra = {"toggles": dict(toggles)}
        try:
            rcfg = ablation_config(cfg, toggles)
        except IceBenchError as exc:
            cells.append({**extra, "status": "error", "message": str(exc)})
            continue
        cells.append(run_cell(rcfg, tr, test_paths, va, ctx=ctx, cache=cache, extra=extra))
    return {"experiment": "ablate-prep", "rows": [dict(r) for r in rows], "config": cfg.to_json(), "cells": cells}


def fair_compare(patch_model: PatchRefModel, pixel_model: PixelRefModel, stacks: Sequence[FeatureStack],
                 patch_size: int, tiling: str = "clamped") -> dict:
    """Score both paradigms at pixel granularity over the same labeled pixels."""
    cms = {"patch": [], "pixel": []}
    for st in stacks:
        patch_raster = tile_patch_predictions(patch_model, st, patch_size, tiling)
        pixel_raster = pixel_model.predict_pixels(st.features)
        assert patch_raster.shape == pixel_raster.shape == st.labels.shape
        cms["patch"].append(confusion(st.labels, patch_raster))
        cms["pixel"].append(confusion(st.labels, pixel_raster))
    out = {"experiment": "fair-compare", "patch_size": patch_size, "tiling": tiling}
    for k, lst in cms.items():
        total = lst[0]
        for cm in lst[1:]:
            total = total + cm
        out[k] = metrics_report(total).to_json()
    return out


def _scores(model: RefModel, windows, targets) -> tuple[float, np.ndarray]:
    if isinstance(model, PatchRefModel):
        cm = confusion(np.asarray(targets), model.predict_patches(windows))
    else:
        cm = ConfusionMatrix(np.zeros((N_CLASSES, N_CLASSES + 1), dtype=np.int64))
        for w, lab in zip(windows, targets):
            cm = cm + confusion(lab, model.predict_pixels(w))
    return f1_w(cm), per_class(cm)["recall"]


def feature_ablation(model: RefModel, windows: Sequence[np.ndarray], targets, baseline: str = "channel_mean",
                     channels: Sequence[str] | None = None) -> dict:
    """Drop in weighted F1 (and per-class recall) when each channel is replaced by a constant.

    ``windows`` are (C, h, w) feature arrays; ``targets`` are patch classes
    for a patch model or label rasters for a pixel model.
    """
    if not len(windows):
        raise ConfigError("feature ablation needs at least one evaluation sample")
    if baseline not in ("channel_mean", "zero"):
        raise ConfigError(f"baseline must be 'channel_mean' or 'zero', got {baseline!r}")
    channels = list(channels or model.channels)
    full_f1, full_recall = _scores(model, windows, targets)
    overall, per_cls, base_values = {}, {}, {}
    for c, name in enumerate(channels):
        if baseline == "zero":
            value = 0.0
        else:
            vals = np.concatenate([np.asarray(w[c], dtype=np.float64).ravel() for w in windows])
            vals = vals[np.isfinite(vals)]
            value = float(vals.mean()) if vals.size else 0.0
        ablated = []
        for w in windows:
            w2 = np.array(w, copy=True)
            w2[c] = value
            ablated.append(w2)
        f1, recall = _scores(model, ablated, targets)
        overall[name] = full_f1 - f1
        per_cls[name] = (full_recall - recall).tolist()
        base_values[name] = value
    return {"experiment": "feature-ablation", "baseline": baseline, "score_full": full_f1,
            "recall_full": full_recall.tolist(), "overall": overall, "per_class": per_cls,
            "baseline_values": base_values}


# -- reports ---------------------------------------------------------------------------------

METRIC_FIELDS = ("accuracy", "precision", "recall", "f1", "iou")
EFFICIENCY_FIELDS = ("MaxMT", "AvgMT", "MaxMI", "AvgMI", "TotCT", "TotCI", "AvgET", "TotTT", "TotTI")
CSV_FIELDS = ("cell_id", "experiment", "train_key", "test_key", "axis", "value", "toggles", "status") \
    + METRIC_FIELDS + EFFICIENCY_FIELDS + ("message",)


def metrics_only(report: Mapping) -> dict:
    """Deterministic projection of a report: metrics and keys, no timing or memory."""
    cells = []
    for c in report.get("cells", []):
        cells.append({k: v for k, v in c.items() if k not in ("efficiency", "provenance")} |
                     {"provenance": {k: v for k, v in c.get("provenance", {}).items()}})
    out = {k: v for k, v in report.items() if k != "cells"}
    out["cells"] = cells
    return out


def cell_rows(report: Mapping) -> list[dict]:
    rows = []
    for i, c in enumerate(report.get("cells", [])):
        row = {k: "" for k in CSV_FIELDS}
        row.update(cell_id=i, experiment=report.get("experiment", ""), status=c.get("status", ""),
                   message=c.get("message", ""))
        for k in ("train_key", "test_key", "axis", "value"):
            if k in c:
                row[k] = c[k]
        if "toggles" in c:
            row["toggles"] = json.dumps(c["toggles"], sort_keys=True)
        for k in METRIC_FIELDS:
            if "metrics" in c:
                row[k] = c["metrics"]["weighted"][k]
        for k in EFFICIENCY_FIELDS:
            if "efficiency" in c:
                row[k] = c["efficiency"][k]
        rows.append(row)
    return rows


def plot_series(report: Mapping) -> dict[str, list[tuple]]:
    """(x, value) series per metric for sweeps; per test key for matrices."""
    series: dict[str, list[tuple]] = {}
    ok = [c for c in report.get("cells", []) if c.get("status") == "ok"]
    if report.get("experiment") == "sweep":
        for m in METRIC_FIELDS:
            series[f"{report['axis']}_{m}"] = [(c["value"], c["metrics"]["weighted"][m]) for c in ok]
    elif report.get("experiment") == "transfer":
        for c in ok:
            series.setdefault(f"f1_train_{c['train_key']}", []).append((c["test_key"], c["metrics"]["weighted"]["f1"]))
    elif report.get("experiment") == "ablate-prep":
        series["f1"] = [(json.dumps(c["toggles"], sort_keys=True), c["metrics"]["weighted"]["f1"]) for c in ok]
    return series


def emit_report(report: Mapping, out_dir) -> dict[str, Path]:
    """Write report.json, metrics.json, cells.csv and plotdata/*.tsv."""
    out = Path(out_dir)
    (out / "plotdata").mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "metrics": out / "metrics.json", "cells": out / "cells.csv"}
    with open(paths["report"], "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=str)
    with open(paths["metrics"], "w", encoding="utf-8") as fh:
        json.dump(metrics_only(report), fh, indent=2, sort_keys=True, default=str)
    with open(paths["cells"], "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(cell_rows(report))
    for name, pts in plot_series(report).items():
        p = out / "plotdata" / f"{name}.tsv"
        with open(p, "w", encoding="utf-8") as fh:
            fh.write("x\tvalue\n")
            for x, v in pts:
                fh.write(f"{x}\t{v!r}\n")
        paths[f"plot:{name}"] = p
    return paths


def any_errors(report: Mapping) -> bool:
    return any(c.get("status") == "error" for c in report.get("cells", []))


# -- persistence -----------------------------------------------------------------------------

MODEL_FILE = "model.icbm"


def save_trained(trained: TrainedModel, out_dir) -> dict[str, Path]:
    """Model, sidecar, normalization stats, pipeline echo and training log."""
    from .refmodels import write_training_log

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"model": trained.model.save(out / MODEL_FILE)}
    for name, obj in (("stats", trained.stats.to_json()), ("pipeline", trained.config.to_json()),
                      ("train_summary", {"n_train_samples": trained.n_train_samples,
                                         "train_sample_hash": trained.train_sample_hash,
                                         "epochs": len(trained.log),
                                         "normalization_id": trained.stats.normalization_id,
                                         "training": asdict(trained.training_summary) if trained.training_summary else None})):
        paths[name] = out / f"{name}.json"
        with open(paths[name], "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
    paths["log"] = write_training_log(trained.log, out / "training_log.jsonl")
    return paths


def load_trained(model_dir) -> TrainedModel:
    from .errors import UntrainedModel
    from .metrics import PhaseSummary

    d = Path(model_dir)
    if not (d / MODEL_FILE).is_file():
        raise UntrainedModel(f"no trained model at {d / MODEL_FILE}; run 'train' first")
    with open(d / "stats.json", encoding="utf-8") as fh:
        stats = NormalizationStats.from_json(json.load(fh))
    with open(d / "pipeline.json", encoding="utf-8") as fh:
        cfg = PipelineConfig.from_json(json.load(fh))
    with open(d / "train_summary.json", encoding="utf-8") as fh:
        summary = json.load(fh)
    with open(d / "training_log.jsonl", encoding="utf-8") as fh:
        train_log = [json.loads(line) for line in fh if line.strip()]
    model = RefModel.load(d / MODEL_FILE)
    phase = PhaseSummary(**summary["training"]) if summary.get("training") else None
    return TrainedModel(model, stats, cfg, summary["n_train_samples"], summary["train_sample_hash"],
                        train_log, phase)
