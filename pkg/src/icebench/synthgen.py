"""Synthetic scenes with Voronoi or checkerboard ice charts.

Each polygon gets a class; its pixels are drawn from per-class Gaussian
channel statistics, and its chart entry is written so that the dominance
rule recovers that class (or, for ambiguous polygons, nothing).  Classes are
assigned across the whole dataset by largest remaining area deficit against
the class priors, so dataset-level class fractions track the priors closely
even with few polygons per scene.
"""
from __future__ import annotations

import datetime as dt
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .chart_labels import CANONICAL_CODE, IceClass, N_CLASSES
from .errors import SpecError
from .partition import DEFAULT_SEASON_RULE
from .rng import keyed_generator
from .scene_store import ChannelSpec, DatasetManifest, IceChartPolygon, Partial, Scene, write_dataset_manifest, write_scene

SAR_CHANNELS = ("nersc_sar_primary", "nersc_sar_secondary")
COARSE_CHANNELS = ("btemp_18_7v", "btemp_36_5v")
INFORMATIVE_CHANNELS = SAR_CHANNELS + COARSE_CHANNELS
AUX_CHANNELS = ("sar_incidence_angle", "distance_map")
ALL_CHANNELS = INFORMATIVE_CHANNELS + AUX_CHANNELS

# class-mean patterns in units of ``separation``; each column is a permutation
# of 0..5 so every channel alone orders the classes differently
_MEAN_PATTERN = np.array([
    [0, 3, 1, 4],
    [1, 5, 3, 0],
    [2, 0, 5, 3],
    [3, 4, 0, 5],
    [4, 1, 2, 1],
    [5, 2, 4, 2],
], dtype=np.float64)


@dataclass(frozen=True)
class LocationDef:
    location_id: str
    region: str = "North"
    melt_doy: int = 150
    freeze_doy: int = 270


def default_locations() -> tuple[LocationDef, ...]:
    return (
        LocationDef("loc_east_1", "East", 140, 280),
        LocationDef("loc_west_1", "West", 155, 265),
        LocationDef("loc_can_1", "CanadianArctic", 165, 255),
        LocationDef("loc_north_1", "North", 175, 245),
    )


def separable_palette(separation: float = 5.0, std: float = 1.0, informative=INFORMATIVE_CHANNELS) -> dict:
    """Per-class (mean, std) for each informative channel."""
    pal = {}
    for k in range(N_CLASSES):
        pal[str(k)] = {
            ch: [float(_MEAN_PATTERN[k, j] * separation) if ch in informative else 0.0, float(std)]
            for j, ch in enumerate(INFORMATIVE_CHANNELS)
        }
    return pal


@dataclass(frozen=True)
class SynthSpec:
    n_scenes: int = 20
    height: int = 400
    width: int = 400
    n_polygons: int = 4
    layout: str = "voronoi"
    checker_block: int = 16
    checker_classes: tuple[int, int] | None = None
    palette: Mapping = field(default_factory=separable_palette)
    class_priors: tuple[float, ...] = (1 / 6,) * 6
    coarse_factor: int = 25
    locations: tuple[LocationDef, ...] = field(default_factory=default_locations)
    months: tuple[int, ...] = tuple(range(1, 13))
    year: int = 2021
    land_strip: int = 0
    explicit_land_mask: bool = False
    nan_border: int = 0
    ambiguous_fraction: float = 0.0
    label_noise: float = 0.0
    season_classes: Mapping[str, Sequence[int]] | None = None
    region_classes: Mapping[str, Sequence[int]] | None = None
    scene_prefix: str = "synth_"
    seed: int = 0

    def __post_init__(self):
        if self.n_scenes < 1 or self.height < 1 or self.width < 1:
            raise SpecError("n_scenes, height and width must be >= 1")
        if self.layout not in ("voronoi", "checkerboard"):
            raise SpecError(f"layout must be 'voronoi' or 'checkerboard', got {self.layout!r}")
        if self.layout == "voronoi" and self.n_polygons < 1:
            raise SpecError("n_polygons must be >= 1")
        if len(self.class_priors) != N_CLASSES or any(p < 0 for p in self.class_priors) or sum(self.class_priors) <= 0:
            raise SpecError(f"class_priors must be {N_CLASSES} non-negative weights")
        for k in range(N_CLASSES):
            if str(k) not in self.palette:
                raise SpecError(f"palette has no entry for class {k}")
        if not self.locations:
            raise SpecError("at least one location is required")
        if not self.months or any(m < 1 or m > 12 for m in self.months):
            raise SpecError("months must be a non-empty subset of 1..12")
        if not 0 <= self.ambiguous_fraction <= 1 or not 0 <= self.label_noise <= 1:
            raise SpecError("ambiguous_fraction and label_noise must be fractions")
        if self.land_strip >= self.width:
            raise SpecError("land_strip must leave some sea")
        object.__setattr__(self, "locations", tuple(
            l if isinstance(l, LocationDef) else LocationDef(**l) for l in self.locations))
        object.__setattr__(self, "months", tuple(self.months))
        object.__setattr__(self, "class_priors", tuple(self.class_priors))

    @property
    def coarse_shape(self) -> tuple[int, int]:
        return max(1, self.height // self.coarse_factor), max(1, self.width // self.coarse_factor)

    def to_json(self) -> dict:
        d = asdict(self)
        d["locations"] = [asdict(l) for l in self.locations]
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "SynthSpec":
        d = dict(d)
        if "preset" in d:
            preset = d.pop("preset")
            if preset not in PRESETS:
                raise SpecError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
            base = PRESETS[preset]().to_json()
            base.update(d)
            d = base
        if "locations" in d:
            d["locations"] = tuple(LocationDef(**l) for l in d["locations"])
        for key in ("class_priors", "months"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("checker_classes") is not None:
            d["checker_classes"] = tuple(d["checker_classes"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError(f"bad synth spec: {exc}") from None

    def replace(self, **changes) -> "SynthSpec":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return SynthSpec(**d)


def separable_spec(**overrides) -> SynthSpec:
    return SynthSpec(**overrides)


def single_polygon_spec(**overrides) -> SynthSpec:
    return SynthSpec(**{"n_polygons": 1, **overrides})


def ambiguous_spec(**overrides) -> SynthSpec:
    return SynthSpec(**{"ambiguous_fraction": 0.5, "n_polygons": 6, **overrides})


def checkerboard_spec(**overrides) -> SynthSpec:
    return SynthSpec(**{"layout": "checkerboard", "checker_block": 16, "checker_classes": (0, 4), **overrides})


def single_informative_spec(channel: str = "nersc_sar_primary", **overrides) -> SynthSpec:
    return SynthSpec(**{"palette": separable_palette(informative=(channel,)), **overrides})


PRESETS = {
    "separable": separable_spec,
    "single_polygon": single_polygon_spec,
    "ambiguous": ambiguous_spec,
    "checkerboard": checkerboard_spec,
    "single_informative": single_informative_spec,
}


# -- geometry ---------------------------------------------------------------------------

@dataclass
class _Plan:
    index: int
    scene_id: str
    location: LocationDef
    date: dt.date
    ids: np.ndarray  # polygon id per pixel, -1 for land
    areas: np.ndarray  # pixel count per polygon id
    allowed: tuple[int, ...]
    classes: np.ndarray | None = None


def _voronoi(spec: SynthSpec, g: np.random.Generator, sea_cols: int) -> np.ndarray:
    n = spec.n_polygons
    seeds = np.column_stack([g.uniform(0, spec.height, n), g.uniform(0, sea_cols, n)])
    rr, cc = np.mgrid[0:spec.height, 0:sea_cols]
    best = np.zeros((spec.height, sea_cols), dtype=np.int32)
    best_d = np.full((spec.height, sea_cols), np.inf)
    for i, (sr, sc) in enumerate(seeds):
        d = (rr + 0.5 - sr) ** 2 + (cc + 0.5 - sc) ** 2
        closer = d < best_d
        best[closer] = i
        best_d[closer] = d[closer]
    # renumber so ids are dense and ordered by first appearance
    _, first, inv = np.unique(best.ravel(), return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv].reshape(best.shape).astype(np.int32)


def _checkerboard(spec: SynthSpec, sea_cols: int) -> np.ndarray:
    b = spec.checker_block
    rr, cc = np.mgrid[0:spec.height, 0:sea_cols]
    nbc = -(-sea_cols // b)
    return ((rr // b) * nbc + cc // b).astype(np.int32)


def _season_of(month: int) -> str:
    return DEFAULT_SEASON_RULE[month]


def _plan_scene(spec: SynthSpec, i: int) -> _Plan:
    g = keyed_generator(spec.seed, "synth-scene", i)
    loc = spec.locations[i % len(spec.locations)]
    month = int(spec.months[int(g.integers(len(spec.months)))])
    day = int(g.integers(1, 29))
    sea_cols = spec.width - spec.land_strip
    ids_sea = _voronoi(spec, g, sea_cols) if spec.layout == "voronoi" else _checkerboard(spec, sea_cols)
    ids = np.full((spec.height, spec.width), -1, dtype=np.int32)
    ids[:, spec.land_strip:] = ids_sea
    areas = np.bincount(ids_sea.ravel())
    allowed = tuple(range(N_CLASSES))
    if spec.season_classes is not None:
        allowed = tuple(spec.season_classes.get(_season_of(month), allowed))
    if spec.region_classes is not None:
        allowed = tuple(spec.region_classes.get(loc.region, allowed))
    return _Plan(i, f"{spec.scene_prefix}{i:04d}", loc, dt.date(spec.year, month, day), ids, areas, allowed)


def _assign_classes(spec: SynthSpec, plans: Sequence[_Plan]) -> None:
    priors = np.asarray(spec.class_priors, dtype=np.float64)
    assigned = np.zeros(N_CLASSES)
    total = 0.0
    for plan in plans:
        if spec.layout == "checkerboard":
            a, b = spec.checker_classes or (plan.allowed[0], plan.allowed[-1])
            nbc = -(-(spec.width - spec.land_strip) // spec.checker_block)
            pid = np.arange(plan.areas.size)
            plan.classes = np.where(((pid // nbc) + (pid % nbc)) % 2 == 0, a, b).astype(np.int64)
            continue
        allowed = np.asarray(plan.allowed)
        mask = np.zeros(N_CLASSES, dtype=bool)
        mask[allowed] = True
        plan.classes = np.zeros(plan.areas.size, dtype=np.int64)
        for pid in np.argsort(-plan.areas, kind="stable"):
            total += plan.areas[pid]
            p = np.where(mask, priors, 0.0)
            if p.sum() == 0:
                p = mask.astype(np.float64)
            deficit = np.where(mask, total * p / p.sum() - assigned, -np.inf)
            k = int(np.argmax(deficit))
            plan.classes[pid] = k
            assigned[k] += plan.areas[pid]


def _chart(spec: SynthSpec, plan: _Plan, g: np.random.Generator) -> tuple[list[IceChartPolygon], np.ndarray]:
    """Chart polygons plus the class each polygon's pixels are drawn from."""
    polys = []
    for pid, k in enumerate(plan.classes):
        k = int(k)
        chart_k = k
        if spec.label_noise > 0 and g.random() < spec.label_noise:
            chart_k = int(g.choice([c for c in range(N_CLASSES) if c != k]))
        if spec.ambiguous_fraction > 0 and g.random() < spec.ambiguous_fraction:
            other = (chart_k + 1 + int(g.integers(N_CLASSES - 1))) % N_CLASSES
            codes = [CANONICAL_CODE[IceClass(max(chart_k, 1))], CANONICAL_CODE[IceClass(max(other, 1))]]
            if codes[0] == codes[1]:
                codes[1] = CANONICAL_CODE[IceClass(2 if codes[0] != 83 else 3)]
            polys.append(IceChartPolygon(pid, 100.0, (Partial(codes[0], 50.0), Partial(codes[1], 50.0))))
        elif chart_k == IceClass.OPEN_WATER:
            polys.append(IceChartPolygon(pid, 0.0, ()))
        else:
            total = float(g.choice([80.0, 90.0, 100.0]))
            minor = float(g.choice([0.0, 10.0]))
            parts = [Partial(CANONICAL_CODE[IceClass(chart_k)], total - minor)]
            if minor:
                other = 1 + (chart_k % (N_CLASSES - 1))  # any ice class other than chart_k
                parts.append(Partial(CANONICAL_CODE[IceClass(other)], minor))
            polys.append(IceChartPolygon(pid, total, tuple(parts)))
    return polys, plan.classes


def _render(spec: SynthSpec, plan: _Plan) -> Scene:
    g = keyed_generator(spec.seed, "synth-render", plan.index)
    polys, pix_classes = _chart(spec, plan, g)
    H, W = spec.height, spec.width
    sea = plan.ids >= 0
    cls = np.where(sea, pix_classes[np.maximum(plan.ids, 0)], 0)
    means = np.array([[spec.palette[str(k)][ch][0] for ch in INFORMATIVE_CHANNELS] for k in range(N_CLASSES)])
    stds = np.array([[spec.palette[str(k)][ch][1] for ch in INFORMATIVE_CHANNELS] for k in range(N_CLASSES)])

    channels = []
    for j, name in enumerate(SAR_CHANNELS):
        data = means[cls, j] + stds[cls, j] * g.standard_normal((H, W))
        if spec.nan_border:
            data[: spec.nan_border] = np.nan
        channels.append(ChannelSpec(name, data.astype(np.float32)))
    ch_, cw_ = spec.coarse_shape
    rows = np.minimum(((np.arange(ch_) + 0.5) * H / ch_).astype(int), H - 1)
    cols = np.minimum(((np.arange(cw_) + 0.5) * W / cw_).astype(int), W - 1)
    coarse_cls = cls[np.ix_(rows, cols)]
    for j, name in enumerate(COARSE_CHANNELS, start=len(SAR_CHANNELS)):
        data = means[coarse_cls, j] + stds[coarse_cls, j] * g.standard_normal((ch_, cw_))
        channels.append(ChannelSpec(name, data.astype(np.float32)))
    cc = np.broadcast_to(np.arange(W, dtype=np.float64), (H, W))
    channels.append(ChannelSpec("sar_incidence_angle", (20.0 + 25.0 * cc / max(W - 1, 1)).astype(np.float32)))
    dist = np.clip(1 + (cc - spec.land_strip) // 10, 1, 41)
    dist[~sea] = 0
    channels.append(ChannelSpec("distance_map", dist.astype(np.float32)))

    land_mask = (~sea).astype(np.uint8) if spec.explicit_land_mask else None
    return Scene(
        scene_id=plan.scene_id,
        location_id=plan.location.location_id,
        acquisition_date=plan.date,
        height=H,
        width=W,
        channels=channels,
        polygon_raster=plan.ids,
        polygons=polys,
        land_mask=land_mask,
    )


def generate_scenes(spec: SynthSpec) -> list[Scene]:
    """In-memory scenes for ``spec``; identical for identical spec and seed."""
    plans = [_plan_scene(spec, i) for i in range(spec.n_scenes)]
    _assign_classes(spec, plans)
    return [_render(spec, p) for p in plans]


def climatology_json(spec: SynthSpec) -> dict:
    return {l.location_id: {"melt_doy": l.melt_doy, "freeze_doy": l.freeze_doy} for l in spec.locations}


def regions_json(spec: SynthSpec) -> dict:
    return {l.location_id: l.region for l in spec.locations}


def _dump(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _write_relative_manifest(paths: Sequence[str], out: Path) -> None:
    # relative entries keep the output directory relocatable
    rel = [os.path.relpath(p, out) for p in paths]
    write_dataset_manifest(DatasetManifest("train", rel), out / "dataset.json")


def generate(spec: SynthSpec, out_dir) -> list[str]:
    """Write scene containers plus ``dataset.json``, ``climatology.json``,
    ``regions.json`` and ``synth_spec.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for scene in generate_scenes(spec):
        paths.append(str(write_scene(scene, out / scene.scene_id)))
    _write_relative_manifest(paths, out)
    _dump(climatology_json(spec), out / "climatology.json")
    _dump(regions_json(spec), out / "regions.json")
    _dump(spec.to_json(), out / "synth_spec.json")
    return paths


SHIFTS = {
    # summer scenes hold open water and thick FYI; winter scenes new and young ice
    "season": {"summer": ((6, 7, 8), (0, 4)), "winter": ((12, 1, 2), (1, 2))},
    "region": {"East": (("loc_east_1",), (0, 4)), "West": (("loc_west_1",), (1, 2))},
}


def generate_paired_shift(spec: SynthSpec, shift: str, out_dir, disjoint: bool = True) -> dict[str, list[str]]:
    """Two partitions whose class sets differ (``disjoint``) or coincide.

    With ``disjoint`` the partitions share no class, so a model trained on one
    cannot score above zero F1 on the other; without it both draw from the
    union of the two class sets.
    """
    if shift not in SHIFTS:
        raise SpecError(f"shift must be one of {sorted(SHIFTS)}, got {shift!r}")
    parts = SHIFTS[shift]
    union = tuple(sorted({c for _, cs in parts.values() for c in cs}))
    out = Path(out_dir)
    result = {}
    for j, (key, (selector, classes)) in enumerate(parts.items()):
        allowed = tuple(classes) if disjoint else union
        priors = tuple(1.0 if k in allowed else 0.0 for k in range(N_CLASSES))
        if shift == "season":
            sub = spec.replace(months=selector, class_priors=priors, scene_prefix=f"{spec.scene_prefix}{key}_",
                               seed=spec.seed * 1000 + j)
        else:
            locs = tuple(l for l in spec.locations if l.location_id in selector) or (LocationDef(selector[0], key),)
            sub = spec.replace(locations=locs, class_priors=priors, scene_prefix=f"{spec.scene_prefix}{key}_",
                               seed=spec.seed * 1000 + j)
        result[key] = generate(sub, out / key)
    _write_relative_manifest([p for v in result.values() for p in v], out)
    _dump(climatology_json(spec), out / "climatology.json")
    _dump(regions_json(spec), out / "regions.json")
    return result
