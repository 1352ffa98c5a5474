"""On-disk scene container and read-only raster access.

A scene directory holds ``manifest.json`` plus headerless little-endian
row-major payloads::

    manifest.json
    channels/<name>.f32     one per channel, at native resolution
    polygons.i32            polygon id per reference-grid pixel, -1 = uncharted
    land_mask.u8            optional, 1 = land

Loaded scenes are immutable: every array is marked read-only.
"""
from __future__ import annotations

import datetime as _dt
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    InvalidScene,
    IoFailure,
    MalformedDate,
    MissingFile,
    OrphanPolygonId,
    PayloadSizeMismatch,
    UnknownChannel,
    UnknownDtype,
)

MANIFEST_NAME = "manifest.json"

#: dtype tag -> little-endian numpy dtype
DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4"), "u8": np.dtype("u1")}

#: distance_map zones treated as land when a scene has no explicit land mask
LAND_ZONES = (0,)

MAX_PARTIALS = 3
PARTIAL_SLACK = 10.0


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True, order="C")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class ChannelSpec:
    """One raster channel at its native resolution."""

    name: str
    data: np.ndarray
    file: str = ""
    dtype: str = "f32"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or min(data.shape) < 1:
            raise InvalidScene(f"channel {self.name!r}: expected a non-empty 2D raster, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data, DTYPES["f32"]))
        if not self.file:
            object.__setattr__(self, "file", f"channels/{self.name}.f32")

    @property
    def native_height(self) -> int:
        return self.data.shape[0]

    @property
    def native_width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ChannelSpec):
            return NotImplemented
        return (
            self.name == other.name
            and self.file == other.file
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True)
class Partial:
    sod_code: int
    concentration: float


@dataclass(frozen=True)
class IceChartPolygon:
    """Chart attributes of one polygon: total concentration and up to three partials."""

    id: int
    total_sic: float
    partials: tuple[Partial, ...] = ()

    def __post_init__(self):
        parts = tuple(p if isinstance(p, Partial) else Partial(int(p[0]), float(p[1])) for p in self.partials)
        object.__setattr__(self, "partials", parts)
        if self.id < 0:
            raise InvalidScene(f"polygon id must be non-negative, got {self.id}")
        if not 0 <= self.total_sic <= 100:
            raise InvalidScene(f"polygon {self.id}: total_sic={self.total_sic} outside 0..100")
        if len(parts) > MAX_PARTIALS:
            raise InvalidScene(f"polygon {self.id}: {len(parts)} partials, at most {MAX_PARTIALS} allowed")
        for p in parts:
            if not 0 <= p.concentration <= 100:
                raise InvalidScene(f"polygon {self.id}: partial concentration {p.concentration} outside 0..100")
        if sum(p.concentration for p in parts) > self.total_sic + PARTIAL_SLACK:
            raise InvalidScene(f"polygon {self.id}: partial concentrations exceed total_sic={self.total_sic}")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "total_sic": self.total_sic,
            "partials": [{"sod_code": p.sod_code, "concentration": p.concentration} for p in self.partials],
        }

    @classmethod
    def from_json(cls, d: dict) -> "IceChartPolygon":
        return cls(
            id=int(d["id"]),
            total_sic=float(d["total_sic"]),
            partials=tuple(Partial(int(p["sod_code"]), float(p["concentration"])) for p in d.get("partials", [])),
        )


def parse_date(value, field_name: str = "acquisition_date") -> _dt.date:
    if isinstance(value, _dt.datetime):
        return value.date()
    if isinstance(value, _dt.date):
        return value
    try:
        return _dt.date.fromisoformat(str(value))
    except ValueError as exc:
        raise MalformedDate(f"{field_name}: {value!r} is not an ISO-8601 date") from exc


@dataclass(frozen=True, eq=False)
class Scene:
    """Co-registered channels, polygon chart and acquisition metadata."""

    scene_id: str
    location_id: str
    acquisition_date: _dt.date
    height: int
    width: int
    channels: tuple[ChannelSpec, ...]
    polygon_raster: np.ndarray
    polygons: tuple[IceChartPolygon, ...]
    land_mask: np.ndarray | None = None
    provenance: dict | None = None
    _by_name: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "acquisition_date", parse_date(self.acquisition_date))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "polygons", tuple(self.polygons))
        if self.height < 1 or self.width < 1:
            raise InvalidScene(f"scene {self.scene_id}: height/width must be >= 1")
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise InvalidScene(f"scene {self.scene_id}: duplicate channel names in {names}")
        self._by_name.update({c.name: c for c in self.channels})

        praster = np.asarray(self.polygon_raster)
        if praster.shape != (self.height, self.width):
            raise InvalidScene(
                f"scene {self.scene_id}: polygon_raster shape {praster.shape} != ({self.height}, {self.width})"
            )
        object.__setattr__(self, "polygon_raster", _frozen(praster, DTYPES["i32"]))
        if self.land_mask is not None:
            lm = np.asarray(self.land_mask)
            if lm.shape != (self.height, self.width):
                raise InvalidScene(f"scene {self.scene_id}: land_mask shape {lm.shape} != ({self.height}, {self.width})")
            object.__setattr__(self, "land_mask", _frozen(lm != 0, np.bool_))

        ids = [p.id for p in self.polygons]
        if len(set(ids)) != len(ids):
            raise InvalidScene(f"scene {self.scene_id}: duplicate polygon ids")
        used = np.unique(self.polygon_raster)
        used = used[used >= 0]
        orphans = np.setdiff1d(used, np.asarray(ids, dtype=np.int64))
        if orphans.size:
            raise OrphanPolygonId(
                f"scene {self.scene_id}: polygon_raster references ids {orphans.tolist()} missing from polygons"
            )
        if np.any(self.polygon_raster < -1):
            raise InvalidScene(f"scene {self.scene_id}: polygon_raster holds values below -1")

    # -- access ---------------------------------------------------------
    @property
    def month(self) -> int:
        return self.acquisition_date.month

    @property
    def day_of_year(self) -> int:
        return self.acquisition_date.timetuple().tm_yday

    @property
    def channel_names(self) -> list[str]:
        return [c.name for c in self.channels]

    def channel(self, name: str) -> ChannelSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownChannel(f"scene {self.scene_id}: no channel {name!r} (have {self.channel_names})") from None

    def polygon(self, pid: int) -> IceChartPolygon:
        for p in self.polygons:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def land(self, land_zones: Sequence[int] = LAND_ZONES) -> np.ndarray:
        """Boolean land raster on the reference grid.

        Uses the explicit mask when present, otherwise pixels whose
        ``distance_map`` zone is in ``land_zones``.  No mask and no
        distance map means no land.
        """
        if self.land_mask is not None:
            return self.land_mask
        if "distance_map" not in self._by_name:
            return np.zeros((self.height, self.width), dtype=bool)
        dm = nearest_resample(self._by_name["distance_map"].data, (self.height, self.width))
        return np.isin(dm, np.asarray(land_zones, dtype=np.float32))

    def replace(self, **changes) -> "Scene":
        kw = {
            "scene_id": self.scene_id,
            "location_id": self.location_id,
            "acquisition_date": self.acquisition_date,
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "polygon_raster": self.polygon_raster,
            "polygons": self.polygons,
            "land_mask": self.land_mask,
            "provenance": self.provenance,
        }
        kw.update(changes)
        return Scene(**kw)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            self.scene_id == other.scene_id
            and self.location_id == other.location_id
            and self.acquisition_date == other.acquisition_date
            and (self.height, self.width) == (other.height, other.width)
            and self.channels == other.channels
            and same(self.polygon_raster, other.polygon_raster)
            and self.polygons == other.polygons
            and same(self.land_mask, other.land_mask)
            and (self.provenance or None) == (other.provenance or None)
        )

    __hash__ = None


def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source index of the nearest cell centre for each of ``dst`` output cells."""
    idx = np.floor((np.arange(dst) + 0.5) * src / dst).astype(np.intp)
    return np.minimum(idx, src - 1)


def nearest_resample(raster: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if raster.shape == tuple(shape):
        return raster
    rows = nearest_indices(raster.shape[0], shape[0])
    cols = nearest_indices(raster.shape[1], shape[1])
    return raster[np.ix_(rows, cols)]


def channel_raster(scene: Scene, name: str) -> tuple[np.ndarray, tuple[int, int]]:
    """Native-resolution raster of one channel and its ``(height, width)``."""
    ch = scene.channel(name)
    return ch.data, (ch.native_height, ch.native_width)


# -- serialization ------------------------------------------------------------

def _read_payload(root: Path, rel: str, dtype_tag: str, shape: tuple[int, int], what: str) -> np.ndarray:
    if dtype_tag not in DTYPES:
        raise UnknownDtype(f"{what}: dtype {dtype_tag!r} not one of {sorted(DTYPES)}")
    dtype = DTYPES[dtype_tag]
    path = root / rel
    if not path.is_file():
        raise MissingFile(f"{what}: file {str(path)!r} not found")
    raw = path.read_bytes()
    expected = shape[0] * shape[1] * dtype.itemsize
    if len(raw) != expected:
        raise PayloadSizeMismatch(f"{what}: {rel} holds {len(raw)} bytes, expected {expected} for shape {shape}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def _read_manifest(path: Path) -> dict:
    mpath = path / MANIFEST_NAME
    if not mpath.is_file():
        raise MissingFile(f"manifest: {str(mpath)!r} not found")
    with open(mpath, encoding="utf-8") as fh:
        return json.load(fh)


def _require(m: dict, key: str, where: str = "manifest"):
    if key not in m:
        raise InvalidScene(f"{where}: missing field {key!r}")
    return m[key]


def load_scene(path) -> Scene:
    """Load and validate a scene directory."""
    root = Path(path)
    m = _read_manifest(root)
    height = int(_require(m, "height"))
    width = int(_require(m, "width"))
    channels = []
    for i, c in enumerate(_require(m, "channels")):
        name = _require(c, "name", f"channels[{i}]")
        shape = (int(_require(c, "native_height", f"channel {name}")), int(_require(c, "native_width", f"channel {name}")))
        if c.get("dtype", "f32") != "f32":
            raise UnknownDtype(f"channel {name}: dtype {c['dtype']!r}, channels must be f32")
        data = _read_payload(root, c["file"], "f32", shape, f"channel {name}")
        channels.append(ChannelSpec(name=name, data=data, file=c["file"]))
    pr = _require(m, "polygon_raster")
    if pr.get("dtype", "i32") != "i32":
        raise UnknownDtype(f"polygon_raster: dtype {pr['dtype']!r}, expected 'i32'")
    praster = _read_payload(root, pr["file"], "i32", (height, width), "polygon_raster")
    land = None
    if m.get("land_mask"):
        lm = m["land_mask"]
        if lm.get("dtype", "u8") != "u8":
            raise UnknownDtype(f"land_mask: dtype {lm['dtype']!r}, expected 'u8'")
        land = _read_payload(root, lm["file"], "u8", (height, width), "land_mask")
    return Scene(
        scene_id=str(_require(m, "scene_id")),
        location_id=str(_require(m, "location_id")),
        acquisition_date=parse_date(_require(m, "acquisition_date")),
        height=height,
        width=width,
        channels=channels,
        polygon_raster=praster,
        polygons=[IceChartPolygon.from_json(p) for p in _require(m, "polygons")],
        land_mask=land,
        provenance=m.get("provenance"),
    )


def scene_manifest(scene: Scene) -> dict:
    m = {
        "scene_id": scene.scene_id,
        "location_id": scene.location_id,
        "acquisition_date": scene.acquisition_date.isoformat(),
        "height": scene.height,
        "width": scene.width,
        "channels": [
            {"name": c.name, "native_height": c.native_height, "native_width": c.native_width, "dtype": "f32", "file": c.file}
            for c in scene.channels
        ],
        "polygon_raster": {"file": "polygons.i32", "dtype": "i32"},
        "polygons": [p.to_json() for p in scene.polygons],
    }
    if scene.land_mask is not None:
        m["land_mask"] = {"file": "land_mask.u8", "dtype": "u8"}
    if scene.provenance:
        m["provenance"] = scene.provenance
    return m


def write_scene(scene: Scene, path) -> Path:
    """Write ``scene`` as a container directory at ``path``."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for c in scene.channels:
            dest = root / c.file
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(c.data.astype(DTYPES["f32"], copy=False).tobytes())
        (root / "polygons.i32").write_bytes(scene.polygon_raster.astype(DTYPES["i32"], copy=False).tobytes())
        if scene.land_mask is not None:
            (root / "land_mask.u8").write_bytes(scene.land_mask.astype(np.uint8).tobytes())
        elif (root / "land_mask.u8").exists():
            (root / "land_mask.u8").unlink()
        with open(root / MANIFEST_NAME, "w", encoding="utf-8") as fh:
            json.dump(scene_manifest(scene), fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"writing scene {scene.scene_id} to {root}: {exc}") from exc
    return root


@dataclass(frozen=True)
class SceneMeta:
    """Manifest-level metadata, readable without touching raster payloads."""

    path: str
    scene_id: str
    location_id: str
    acquisition_date: _dt.date
    height: int
    width: int

    @property
    def month(self) -> int:
        return self.acquisition_date.month

    @property
    def day_of_year(self) -> int:
        return self.acquisition_date.timetuple().tm_yday


def read_scene_meta(path) -> SceneMeta:
    m = _read_manifest(Path(path))
    return SceneMeta(
        path=str(path),
        scene_id=str(_require(m, "scene_id")),
        location_id=str(_require(m, "location_id")),
        acquisition_date=parse_date(_require(m, "acquisition_date")),
        height=int(_require(m, "height")),
        width=int(_require(m, "width")),
    )


SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class DatasetManifest:
    """A named split listing scene container paths."""

    split: str
    scenes: tuple[str, ...]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidScene(f"manifest split {self.split!r} not one of {SPLITS}")
        object.__setattr__(self, "scenes", tuple(str(s) for s in self.scenes))

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def metas(self) -> list[SceneMeta]:
        return [read_scene_meta(p) for p in self.scenes]

    def validate(self) -> None:
        """Check every path exists, parses, and scene ids are unique."""
        seen = {}
        for p in self.scenes:
            if not os.path.isdir(p):
                raise MissingFile(f"manifest {self.split}: scene path {p!r} not found")
            meta = read_scene_meta(p)
            if meta.scene_id in seen:
                raise InvalidScene(f"manifest {self.split}: scene_id {meta.scene_id!r} in both {seen[meta.scene_id]} and {p}")
            seen[meta.scene_id] = p

    def load(self) -> Iterable[Scene]:
        for p in self.scenes:
            yield load_scene(p)

    def to_json(self) -> dict:
        return {"split": self.split, "scenes": list(self.scenes)}


def load_dataset_manifest(path) -> DatasetManifest:
    """Read a split manifest; relative scene paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"dataset manifest {str(path)!r} not found")
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    base = path.parent
    scenes = [str(p) if os.path.isabs(p) else str(base / p) for p in d.get("scenes", [])]
    return DatasetManifest(split=d.get("split", "train"), scenes=scenes)


def write_dataset_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=2)
        fh.write("\n")
    return path
