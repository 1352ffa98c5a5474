"""Seasonal, cryospheric and regional partitions of scene manifests."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .chart_labels import IGNORE, N_CLASSES, LabelingConfig, rasterize_labels
from .errors import ConfigError, InsufficientScenes, UnknownLocation
from .rng import keyed_generator
from .scene_store import DatasetManifest, SceneMeta, load_scene, read_scene_meta

SEASONS = ("spring", "summer", "fall", "winter")
CRYO_SEASONS = ("melt", "freeze")
UNDEFINED = "undefined"
REGIONS = ("East", "West", "CanadianArctic", "North")

DEFAULT_SEASON_RULE = {
    3: "spring", 4: "spring", 5: "spring",
    6: "summer", 7: "summer", 8: "summer",
    9: "fall", 10: "fall", 11: "fall",
    12: "winter", 1: "winter", 2: "winter",
}


@dataclass(frozen=True)
class SeasonRule:
    mapping: Mapping[int, str] = field(default_factory=lambda: dict(DEFAULT_SEASON_RULE))

    def __post_init__(self):
        m = {int(k): v for k, v in self.mapping.items()}
        if set(m) != set(range(1, 13)):
            raise ConfigError(f"season rule must cover months 1..12, got {sorted(m)}")
        object.__setattr__(self, "mapping", m)

    def __call__(self, month: int) -> str:
        return self.mapping[month]


@dataclass(frozen=True)
class MeltClimatology:
    """Average melt-onset and freeze-onset day of year per location."""

    entries: Mapping[str, tuple[int, int]]

    def __post_init__(self):
        for loc, (melt, freeze) in self.entries.items():
            if not (1 <= melt <= 366 and 1 <= freeze <= 366):
                raise ConfigError(f"climatology {loc}: day of year outside 1..366")
            if melt >= freeze:
                raise ConfigError(f"climatology {loc}: melt_doy {melt} must precede freeze_doy {freeze}")

    @classmethod
    def from_json(cls, d: Mapping) -> "MeltClimatology":
        return cls({k: (int(v["melt_doy"]), int(v["freeze_doy"])) for k, v in d.items()})

    def to_json(self) -> dict:
        return {k: {"melt_doy": m, "freeze_doy": f} for k, (m, f) in sorted(self.entries.items())}


@dataclass(frozen=True)
class RegionMap:
    regions: Mapping[str, str]

    def __post_init__(self):
        bad = {k: v for k, v in self.regions.items() if v not in REGIONS}
        if bad:
            raise ConfigError(f"unknown region categories {bad}; expected one of {REGIONS}")

    @classmethod
    def from_json(cls, d: Mapping) -> "RegionMap":
        return cls(dict(d))

    def to_json(self) -> dict:
        return dict(sorted(self.regions.items()))


def load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _meta(scene):
    return read_scene_meta(scene) if isinstance(scene, (str, Path)) else scene


def conventional_season(scene, rule: SeasonRule = SeasonRule()) -> str:
    return rule(_meta(scene).month)


def cryo_season(scene, clim: MeltClimatology) -> str:
    """``melt`` inside [melt_doy, freeze_doy), ``freeze`` otherwise, ``undefined`` without climatology."""
    meta = _meta(scene)
    entry = clim.entries.get(meta.location_id)
    if entry is None:
        return UNDEFINED
    melt, freeze = entry
    return "melt" if melt <= meta.day_of_year < freeze else "freeze"


def region_of(scene, regions: RegionMap) -> str:
    loc = _meta(scene).location_id
    try:
        return regions.regions[loc]
    except KeyError:
        raise UnknownLocation(f"location {loc!r} is not in the region map") from None


@dataclass(frozen=True)
class PartitionContext:
    """Inputs the partition filters need besides the scene itself."""

    season_rule: SeasonRule = field(default_factory=SeasonRule)
    climatology: MeltClimatology | None = None
    regions: RegionMap | None = None

    def key(self, kind: str) -> Callable[[SceneMeta], str]:
        if kind == "season":
            return lambda m: conventional_season(m, self.season_rule)
        if kind == "cryo":
            if self.climatology is None:
                raise ConfigError("cryo partition requested without a climatology")
            return lambda m: cryo_season(m, self.climatology)
        if kind == "region":
            if self.regions is None:
                raise ConfigError("region partition requested without a region map")
            return lambda m: region_of(m, self.regions)
        if kind == "all":
            return lambda m: "all"
        raise ConfigError(f"unknown partition kind {kind!r}")


def _accepts(value, wanted) -> bool:
    if wanted is None:
        return True
    if isinstance(wanted, str):
        return value == wanted
    return value in wanted


def filter_scenes(metas: Sequence[SceneMeta], filters: Mapping | None, ctx: PartitionContext) -> list[SceneMeta]:
    """Keep scenes matching every filter; a filter value may be one key or a list."""
    filters = {k: v for k, v in (filters or {}).items() if v is not None}
    keyfns = {k: ctx.key(k) for k in filters}
    return [m for m in metas if all(_accepts(keyfns[k](m), v) for k, v in filters.items())]


def holdout_count(n: int, fixed_count: int | None = None, fraction: float | None = None) -> int:
    if fixed_count is not None:
        if fixed_count > n - 1:
            raise InsufficientScenes(f"fixed validation count {fixed_count} leaves no training scenes out of {n}")
        return int(fixed_count)
    if fraction is None:
        raise ConfigError("holdout needs fixed_count or fraction")
    if not 0 < fraction < 1:
        raise ConfigError(f"holdout fraction must be in (0, 1), got {fraction}")
    return max(1, int(math.floor(fraction * n + 0.5)))


def make_splits(manifest: DatasetManifest | Sequence[str], filters: Mapping | None = None,
                holdout: Mapping | None = None, seed: int = 0,
                ctx: PartitionContext = PartitionContext()) -> tuple[DatasetManifest, DatasetManifest]:
    """Filter, then draw a seed-deterministic validation holdout.

    Both output manifests keep the input order of their scenes.
    """
    holdout = dict(holdout or {"fraction": 0.1})
    metas = filter_scenes([read_scene_meta(p) for p in manifest], filters, ctx)
    n = len(metas)
    if n < 2:
        raise InsufficientScenes(f"filters {dict(filters or {})} leave {n} scene(s); need at least 2")
    k = holdout_count(n, holdout.get("fixed_count"), holdout.get("fraction"))
    chosen = set(keyed_generator(seed, "make_splits").permutation(n)[:k].tolist())
    train = [m.path for i, m in enumerate(metas) if i not in chosen]
    val = [m.path for i, m in enumerate(metas) if i in chosen]
    return DatasetManifest("train", train), DatasetManifest("validation", val)


def group_by(manifest, kind: str, ctx: PartitionContext = PartitionContext()) -> dict[str, list[str]]:
    """Scene paths per partition key, in manifest order."""
    keyfn = ctx.key(kind)
    out: dict[str, list[str]] = defaultdict(list)
    for p in manifest:
        out[keyfn(read_scene_meta(p))].append(str(p))
    return dict(out)


def class_distribution(manifest, label_cfg: LabelingConfig = LabelingConfig(), granularity: str = "pixel",
                       kind: str = "all", ctx: PartitionContext = PartitionContext(),
                       sampling_cfg=None, prep=None) -> dict[str, list[float]]:
    """Per-class fractions per partition key.

    ``pixel`` counts non-ignore pixels; ``patch`` counts accepted patches
    (``sampling_cfg`` and ``prep`` control extraction).
    """
    if granularity not in ("pixel", "patch"):
        raise ConfigError(f"granularity must be 'pixel' or 'patch', got {granularity!r}")
    keyfn = ctx.key(kind)
    counts: dict[str, np.ndarray] = {}
    for p in manifest:
        scene = load_scene(p)
        key = keyfn(scene)
        if granularity == "pixel":
            lab = rasterize_labels(scene, label_cfg)
            c = np.bincount(lab[lab != IGNORE].ravel(), minlength=N_CLASSES)[:N_CLASSES]
        else:
            from .preprocess import PrepConfig, prepare_scene
            from .sampling import SamplingConfig, class_counts, extract_patches
            recs = extract_patches(prepare_scene(scene, prep or PrepConfig(), label_cfg), sampling_cfg or SamplingConfig())
            c = np.asarray(class_counts(recs))
        counts[key] = counts.get(key, np.zeros(N_CLASSES, dtype=np.int64)) + c
    return {k: (v / v.sum()).tolist() for k, v in counts.items() if v.sum() > 0}
