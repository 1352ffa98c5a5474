"""Channel co-registration, downscaling, standardization and land masking."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .chart_labels import IGNORE, N_CLASSES
from .errors import ConfigError, DegenerateChannel, EmptyOutput, IncompatibleGrid, MissingStats
from .scene_store import ChannelSpec, DatasetManifest, LAND_ZONES, Scene, load_scene, nearest_resample

KERNELS = ("block_average", "block_max", "nearest_replicate")

#: categorical channels pooled with block_max by default
CATEGORICAL_CHANNELS = frozenset({"distance_map"})

MONTH_CHANNEL = "month"
MONTH_CENTER = 6.5
MONTH_SCALE = 3.45


@dataclass(frozen=True)
class AlignmentPolicy:
    """Kernel per channel; unlisted channels get the default for their kind."""

    kernels: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, k in self.kernels.items():
            if k not in KERNELS:
                raise ConfigError(f"alignment kernel for {name!r} must be one of {KERNELS}, got {k!r}")

    def kernel_for(self, name: str, native: tuple[int, int], ref: tuple[int, int]) -> str:
        if name in self.kernels:
            return self.kernels[name]
        if native[0] < ref[0] or native[1] < ref[1]:
            return "nearest_replicate"
        return "block_max" if name in CATEGORICAL_CHANNELS else "block_average"

    def assignments(self, scene: Scene) -> dict[str, str]:
        return {
            c.name: self.kernel_for(c.name, (c.native_height, c.native_width), (scene.height, scene.width))
            for c in scene.channels
        }

    def to_json(self) -> dict:
        return dict(sorted(self.kernels.items()))


@dataclass(frozen=True)
class DownscaleConfig:
    ratio: int = 1

    def __post_init__(self):
        if int(self.ratio) != self.ratio or self.ratio < 1:
            raise ConfigError(f"downscale ratio must be a positive integer, got {self.ratio}")


def _blocks(raster: np.ndarray, ry: int, rx: int) -> np.ndarray:
    h, w = raster.shape[0] // ry, raster.shape[1] // rx
    if h == 0 or w == 0:
        raise EmptyOutput(f"downscaling {raster.shape} by {(ry, rx)} leaves no output cells")
    return raster[: h * ry, : w * rx].reshape(h, ry, w, rx).swapaxes(1, 2).reshape(h, w, ry * rx)


def _pool(raster: np.ndarray, ry: int, rx: int, kernel: str) -> np.ndarray:
    if ry == 1 and rx == 1:
        return raster.copy()
    blocks = _blocks(raster.astype(np.float64, copy=False), ry, rx)
    finite = np.isfinite(blocks)
    clean = np.where(finite, blocks, 0.0)
    n = finite.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        if kernel == "block_average":
            out = clean.sum(axis=-1) / n
        elif kernel == "block_max":
            out = np.where(finite, blocks, -np.inf).max(axis=-1)
        else:
            raise ConfigError(f"kernel {kernel!r} cannot reduce a raster")
    out[n == 0] = np.nan
    if not np.issubdtype(raster.dtype, np.floating):
        return out
    return out.astype(raster.dtype, copy=False)


def downscale(raster: np.ndarray, ratio: int, kernel: str = "block_average") -> np.ndarray:
    """Aggregate each ``ratio``×``ratio`` block; trailing rows/cols are dropped.

    Non-finite pixels are skipped within a block; a block with no finite
    member is NaN.
    """
    DownscaleConfig(ratio)
    raster = np.asarray(raster)
    if ratio == 1:
        return raster.copy()
    return _pool(raster, ratio, ratio, kernel)


def downscale_labels(labels: np.ndarray, ratio: int) -> np.ndarray:
    """Majority vote over non-ignore labels per block; ties go to the smaller class."""
    DownscaleConfig(ratio)
    labels = np.asarray(labels, dtype=np.uint8)
    if ratio == 1:
        return labels.copy()
    blocks = _blocks(labels, ratio, ratio)
    counts = np.stack([(blocks == c).sum(axis=-1) for c in range(N_CLASSES)], axis=-1)
    out = counts.argmax(axis=-1).astype(np.uint8)  # argmax returns the first maximum
    out[counts.sum(axis=-1) == 0] = IGNORE
    return out


def downscale_ids(ids: np.ndarray, ratio: int) -> np.ndarray:
    """Majority polygon id per block (ties to the smaller id; -1 only if all uncharted)."""
    if ratio == 1:
        return np.array(ids, dtype=np.int32)
    blocks = _blocks(np.asarray(ids, dtype=np.int64), ratio, ratio)
    out = np.full(blocks.shape[:2], -1, dtype=np.int32)
    best = np.zeros(blocks.shape[:2], dtype=np.int64)
    for pid in np.unique(blocks):  # ascending, so ties keep the smaller id
        if pid < 0:
            continue
        cnt = (blocks == pid).sum(axis=-1)
        win = cnt > best
        out[win] = pid
        best[win] = cnt[win]
    return out


def align_channel(data: np.ndarray, ref: tuple[int, int], kernel: str, name: str = "") -> np.ndarray:
    nh, nw = data.shape
    H, W = ref
    if (nh, nw) == (H, W):
        return data
    if kernel == "nearest_replicate" or (nh <= H and nw <= W):
        return nearest_resample(data, ref)
    if nh < H or nw < W:
        raise IncompatibleGrid(f"channel {name!r}: native {data.shape} mixes up- and down-sampling vs {ref}")
    if nh % H or nw % W:
        raise IncompatibleGrid(f"channel {name!r}: native {data.shape} is not an integer multiple of reference {ref}")
    return _pool(data, nh // H, nw // W, kernel)


def align_scene(scene: Scene, policy: AlignmentPolicy = AlignmentPolicy()) -> Scene:
    """Bring every channel onto the scene's reference grid."""
    ref = (scene.height, scene.width)
    if all((c.native_height, c.native_width) == ref for c in scene.channels):
        return scene
    kernels = policy.assignments(scene)
    channels = [
        ChannelSpec(c.name, align_channel(c.data, ref, kernels[c.name], c.name), file=c.file)
        for c in scene.channels
    ]
    return scene.replace(channels=channels)


def downscale_scene(scene: Scene, ratio: int, policy: AlignmentPolicy = AlignmentPolicy(),
                    land_zones=LAND_ZONES) -> Scene:
    """Align then downscale every raster of a scene by ``ratio``.

    The land mask is materialized before pooling (any land pixel makes the
    block land) so that categorical zone ids are never averaged.
    """
    aligned = align_scene(scene, policy)
    if ratio == 1:
        return aligned
    kernels = policy.assignments(aligned)
    land = aligned.land(land_zones)
    ids = downscale_ids(aligned.polygon_raster, ratio)
    channels = []
    for c in aligned.channels:
        if kernels[c.name] == "nearest_replicate":
            data = nearest_resample(c.data, ids.shape)
        else:
            data = downscale(c.data, ratio, kernels[c.name])
        channels.append(ChannelSpec(c.name, data, file=c.file))
    land_ds = _blocks(land, ratio, ratio).any(axis=-1)
    prov = dict(scene.provenance or {})
    prov["downscale_ratio"] = int(ratio) * int(prov.get("downscale_ratio", 1))
    prov["alignment_policy"] = policy.assignments(scene)
    prov["downscale_kernels"] = kernels
    return aligned.replace(height=ids.shape[0], width=ids.shape[1], channels=channels,
                           polygon_raster=ids, land_mask=land_ds, provenance=prov)


# -- normalization --------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationStats:
    mean: Mapping[str, float]
    std: Mapping[str, float]

    def to_json(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_json(cls, d: dict) -> "NormalizationStats":
        return cls(mean={k: float(v) for k, v in d["mean"].items()}, std={k: float(v) for k, v in d["std"].items()})

    @property
    def normalization_id(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def _scenes(source) -> Iterable[Scene]:
    if isinstance(source, DatasetManifest):
        return source.load()
    return (load_scene(s) if not isinstance(s, Scene) else s for s in source)


def compute_normalization(train, channels: Sequence[str], exempt: Sequence[str] = ()) -> NormalizationStats:
    """Per-channel mean and population std over finite pixels of the training split.

    ``train`` is a DatasetManifest or an iterable of scenes.  Per-scene
    moments are merged with Chan's pairwise update, so the result depends
    only on manifest order.  Channels in ``exempt`` that turn out constant
    get std 1.0 instead of raising.
    """
    names = [c for c in channels if c != MONTH_CHANNEL]
    n = {c: 0 for c in names}
    mean = {c: 0.0 for c in names}
    m2 = {c: 0.0 for c in names}
    for scene in _scenes(train):
        for c in names:
            x = scene.channel(c).data
            x = x[np.isfinite(x)].astype(np.float64)
            if x.size == 0:
                continue
            nb, mb = x.size, float(x.mean())
            m2b = float(((x - mb) ** 2).sum())
            na = n[c]
            tot = na + nb
            delta = mb - mean[c]
            mean[c] += delta * nb / tot
            m2[c] += m2b + delta * delta * na * nb / tot
            n[c] = tot
    std = {}
    for c in names:
        if n[c] == 0:
            raise DegenerateChannel(f"channel {c!r} has no finite pixels in the training split")
        s = float(np.sqrt(m2[c] / n[c]))
        if s == 0.0 or s < 1e-12 * max(1.0, abs(mean[c])):
            if c in exempt:
                s = 1.0
            else:
                raise DegenerateChannel(f"channel {c!r} is constant ({mean[c]}) over the training split")
        std[c] = s
    return NormalizationStats(mean=mean, std=std)


@dataclass(frozen=True, eq=False)
class FeatureStack:
    """Model-ready standardized channels with their labels for one scene."""

    scene_id: str
    channels: tuple[str, ...]
    features: np.ndarray  # (C, H, W) float32
    labels: np.ndarray  # (H, W) uint8
    land: np.ndarray  # (H, W) bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def month_value(month: int) -> float:
    return (month - MONTH_CENTER) / MONTH_SCALE


def apply_mask_and_normalize(scene: Scene, stats: NormalizationStats, land_policy: str = "exclude",
                             labels: np.ndarray | None = None, channels: Sequence[str] | None = None,
                             land_zones=LAND_ZONES) -> FeatureStack:
    """Standardize channels and apply the land policy.

    The scene must already be aligned.  Pixels where any feature is
    non-finite are labeled 255.  With ``land_policy="exclude"`` land pixels
    become 0 in every channel and 255 in the labels.
    """
    if land_policy not in ("include", "exclude"):
        raise ConfigError(f"land_policy must be 'include' or 'exclude', got {land_policy!r}")
    names = tuple(channels) if channels is not None else tuple(scene.channel_names)
    shape = (scene.height, scene.width)
    feats = np.empty((len(names),) + shape, dtype=np.float32)
    for i, name in enumerate(names):
        if name == MONTH_CHANNEL:
            feats[i] = month_value(scene.month)
            continue
        if name not in stats.mean:
            raise MissingStats(f"no normalization stats for channel {name!r}")
        data = scene.channel(name).data
        if data.shape != shape:
            raise IncompatibleGrid(f"channel {name!r} is {data.shape}; align the scene to {shape} first")
        feats[i] = (data.astype(np.float64) - stats.mean[name]) / stats.std[name]
    if labels is None:
        from .chart_labels import rasterize_labels
        labels = rasterize_labels(scene, land_zones=land_zones)
    labels = np.array(labels, dtype=np.uint8)
    if labels.shape != shape:
        raise IncompatibleGrid(f"labels are {labels.shape}, scene grid is {shape}")
    land = np.array(scene.land(land_zones), dtype=bool)
    if land_policy == "exclude":
        feats[:, land] = 0.0
        labels[land] = IGNORE
    labels[~np.isfinite(feats).all(axis=0)] = IGNORE
    return FeatureStack(scene_id=scene.scene_id, channels=names, features=feats, labels=labels, land=land)


@dataclass(frozen=True)
class PrepConfig:
    """Everything needed to turn a stored scene into a FeatureStack."""

    channels: tuple[str, ...] | None = None
    downscale_ratio: int = 1
    alignment: AlignmentPolicy = field(default_factory=AlignmentPolicy)
    land_policy: str = "exclude"
    land_zones: tuple[int, ...] = LAND_ZONES

    def __post_init__(self):
        DownscaleConfig(self.downscale_ratio)
        if self.land_policy not in ("include", "exclude"):
            raise ConfigError(f"land_policy must be 'include' or 'exclude', got {self.land_policy!r}")
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "land_zones", tuple(self.land_zones))

    def to_json(self) -> dict:
        return {
            "channels": list(self.channels) if self.channels is not None else None,
            "downscale_ratio": self.downscale_ratio,
            "alignment": self.alignment.to_json(),
            "land_policy": self.land_policy,
            "land_zones": list(self.land_zones),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PrepConfig":
        d = dict(d)
        if "alignment" in d:
            d["alignment"] = AlignmentPolicy(d["alignment"] or {})
        return cls(**d)


def identity_stats(channels: Sequence[str]) -> NormalizationStats:
    return NormalizationStats(mean={c: 0.0 for c in channels}, std={c: 1.0 for c in channels})


def prepare_scene(scene: Scene, prep: PrepConfig = PrepConfig(), label_cfg=None,
                  stats: NormalizationStats | None = None) -> FeatureStack:
    """Label, align, downscale, standardize and mask one scene.

    Labels are rasterized on the original grid and then majority-pooled, so
    they never depend on how the feature channels were resampled.  Without
    ``stats`` channels are passed through unscaled.
    """
    from .chart_labels import LabelingConfig, rasterize_labels

    label_cfg = label_cfg or LabelingConfig()
    labels = downscale_labels(rasterize_labels(scene, label_cfg, prep.land_zones), prep.downscale_ratio)
    prepared = downscale_scene(scene, prep.downscale_ratio, prep.alignment, prep.land_zones)
    names = prep.channels if prep.channels is not None else tuple(prepared.channel_names)
    if stats is None:
        stats = identity_stats([c for c in names if c != MONTH_CHANNEL])
    return apply_mask_and_normalize(prepared, stats, prep.land_policy, labels=labels, channels=names,
                                    land_zones=prep.land_zones)
