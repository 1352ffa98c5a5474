"""Ice-chart decoding: SIGRID-3 stage-of-development codes to six ice classes.

Polygon labels use the normalized dominance rule: each partial concentration
is divided by the polygon's total concentration, and the polygon takes the
class of the largest share only if that share reaches the dominance
threshold.  Everything else is marked ``IGNORE`` (255).
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, PayloadSizeMismatch
from .scene_store import IceChartPolygon, LAND_ZONES, Scene

IGNORE = 255
N_CLASSES = 6


class IceClass(enum.IntEnum):
    OPEN_WATER = 0
    NEW_ICE = 1
    YOUNG_ICE = 2
    THIN_FYI = 3
    THICK_FYI = 4
    OLD_ICE = 5

    @property
    def label(self) -> str:
        return CLASS_NAMES[self.value]


CLASS_NAMES = ("Open Water", "New Ice", "Young Ice", "Thin FYI", "Thick FYI", "Old Ice")

# grouping is verbatim, including 86 with thick rather than thin first-year ice
SIGRID_CLASSES: dict[int, IceClass] = {
    0: IceClass.OPEN_WATER,
    80: IceClass.OPEN_WATER,
    81: IceClass.NEW_ICE,
    82: IceClass.NEW_ICE,
    83: IceClass.YOUNG_ICE,
    84: IceClass.YOUNG_ICE,
    85: IceClass.YOUNG_ICE,
    87: IceClass.THIN_FYI,
    88: IceClass.THIN_FYI,
    89: IceClass.THIN_FYI,
    86: IceClass.THICK_FYI,
    91: IceClass.THICK_FYI,
    93: IceClass.THICK_FYI,
    95: IceClass.OLD_ICE,
    96: IceClass.OLD_ICE,
    97: IceClass.OLD_ICE,
}

#: representative code per class, used when synthesizing charts
CANONICAL_CODE = {IceClass.OPEN_WATER: 80, IceClass.NEW_ICE: 81, IceClass.YOUNG_ICE: 83,
                  IceClass.THIN_FYI: 87, IceClass.THICK_FYI: 91, IceClass.OLD_ICE: 95}


def map_sigrid_code(sod_code: int) -> IceClass | None:
    """Class for a SIGRID-3 stage-of-development code, ``None`` if unknown."""
    return SIGRID_CLASSES.get(int(sod_code))


@dataclass(frozen=True)
class LabelingConfig:
    dominance_threshold: float = 0.65
    open_water_sic_max: float = 0.0

    def __post_init__(self):
        if not 0.5 < self.dominance_threshold <= 1.0:
            raise ConfigError(f"dominance_threshold must be in (0.5, 1.0], got {self.dominance_threshold}")
        if not 0 <= self.open_water_sic_max <= 100:
            raise ConfigError(f"open_water_sic_max must be a percentage, got {self.open_water_sic_max}")


def polygon_label(poly: IceChartPolygon, cfg: LabelingConfig = LabelingConfig()) -> int:
    """Class value of a chart polygon, or ``IGNORE`` when no type dominates."""
    if poly.total_sic <= cfg.open_water_sic_max:
        return int(IceClass.OPEN_WATER)
    if not poly.partials:
        return IGNORE
    shares = [min(p.concentration / poly.total_sic, 1.0) for p in poly.partials]
    best = int(np.argmax(shares))
    if shares[best] < cfg.dominance_threshold:
        return IGNORE
    cls = map_sigrid_code(poly.partials[best].sod_code)
    return IGNORE if cls is None else int(cls)


def rasterize_labels(scene: Scene, cfg: LabelingConfig = LabelingConfig(), land_zones=LAND_ZONES) -> np.ndarray:
    """Per-pixel uint8 labels on the scene's reference grid.

    Uncharted pixels (polygon id -1), land, and pixels of ignored polygons
    are 255.
    """
    ids = scene.polygon_raster
    max_id = max((p.id for p in scene.polygons), default=-1)
    lut = np.full(max_id + 2, IGNORE, dtype=np.uint8)  # last slot catches id -1
    for p in scene.polygons:
        lut[p.id] = polygon_label(p, cfg)
    labels = lut[np.where(ids < 0, max_id + 1, ids)]
    labels[scene.land(land_zones)] = IGNORE
    return labels


def write_label_raster(labels: np.ndarray, scene_id: str, path, cfg: LabelingConfig = LabelingConfig()) -> Path:
    """Persist labels as raw uint8 plus a ``.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())
    side = {"scene_id": scene_id, "height": int(labels.shape[0]), "width": int(labels.shape[1]),
            "threshold": cfg.dominance_threshold}
    with open(path.with_suffix(path.suffix + ".json"), "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=2)
    return path


def read_label_raster(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json"), encoding="utf-8") as fh:
        side = json.load(fh)
    raw = path.read_bytes()
    if len(raw) != side["height"] * side["width"]:
        raise PayloadSizeMismatch(f"label raster {path}: {len(raw)} bytes for {side['height']}x{side['width']}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(side["height"], side["width"]).copy(), side
