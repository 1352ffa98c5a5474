"""Support-weighted accuracy metrics and CPU-side efficiency accounting.

Per-class precision, recall, F1 and IoU come from a one-vs-rest reduction of
the confusion matrix.  Weighted values average them with each class's true
support as weight.  A prediction of 255 on a labeled pixel is an abstention
and always counts as wrong.
"""
from __future__ import annotations

import threading
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .chart_labels import IGNORE, N_CLASSES
from .errors import DomainError, EmptySupport, ShapeMismatch

ABSTAIN = N_CLASSES  # column index of abstentions
GB = 1e9


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes plus one abstain column."""

    counts: np.ndarray  # (N_CLASSES, N_CLASSES + 1) int64

    @property
    def square(self) -> np.ndarray:
        return self.counts[:, :N_CLASSES]

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.square).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.square.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.support - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fp - self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def confusion(y_true, y_pred, ignore: int = IGNORE) -> ConfusionMatrix:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ShapeMismatch(f"y_true {y_true.shape} vs y_pred {y_pred.shape}")
    t = y_true.ravel().astype(np.int64)
    p = y_pred.ravel().astype(np.int64)
    keep = t != ignore
    t, p = t[keep], p[keep]
    p = np.where(p == ignore, ABSTAIN, p)
    if t.size and (t.min() < 0 or t.max() >= N_CLASSES):
        raise DomainError(f"true labels must be in 0..{N_CLASSES - 1} or {ignore}")
    if p.size and (p.min() < 0 or p.max() > ABSTAIN):
        raise DomainError(f"predicted labels must be in 0..{N_CLASSES - 1} or {ignore}")
    width = N_CLASSES + 1
    counts = np.bincount(t * width + p, minlength=N_CLASSES * width).reshape(N_CLASSES, width)
    return ConfusionMatrix(counts.astype(np.int64))


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = num.astype(np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class(cm: ConfusionMatrix) -> dict[str, np.ndarray]:
    tp, fp, fn = cm.tp, cm.fp, cm.fn
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    iou = _ratio(tp, tp + fp + fn)
    return {"precision": precision, "recall": recall, "f1": f1, "iou": iou, "support": cm.support}


def _weights(cm: ConfusionMatrix) -> np.ndarray:
    n = cm.total
    if n == 0:
        raise EmptySupport("no labeled samples to score")
    return cm.support / n


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptySupport("no labeled samples to score")
    return float(cm.tp.sum() / cm.total)


def precision_w(cm: ConfusionMatrix) -> float:
    return float(np.dot(_weights(cm), per_class(cm)["precision"]))


def recall_w(cm: ConfusionMatrix) -> float:
    # support-weighted recall collapses to sum(TP)/N; computed that way so it
    # equals accuracy bit for bit
    return accuracy(cm)


def f1_w(cm: ConfusionMatrix) -> float:
    return float(np.dot(_weights(cm), per_class(cm)["f1"]))


def iou_w(cm: ConfusionMatrix) -> float:
    return float(np.dot(_weights(cm), per_class(cm)["iou"]))


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    iou: float
    per_class: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "weighted": {k: getattr(self, k) for k in ("accuracy", "precision", "recall", "f1", "iou")},
            "per_class": self.per_class,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        return cls(**d["weighted"], per_class=d.get("per_class", {}))


def metrics_report(cm: ConfusionMatrix) -> MetricsReport:
    pc = per_class(cm)
    return MetricsReport(
        accuracy=accuracy(cm),
        precision=precision_w(cm),
        recall=recall_w(cm),
        f1=f1_w(cm),
        iou=iou_w(cm),
        per_class={k: [float(x) if k != "support" else int(x) for x in v] for k, v in pc.items()},
    )


def evaluate(y_true, y_pred) -> MetricsReport:
    return metrics_report(confusion(y_true, y_pred))


# -- efficiency -----------------------------------------------------------------------

def core_hours(usage_fraction: float, duration_hours: float, computing_units: int) -> float:
    """Usage fraction times duration times number of computing units."""
    if not 0.0 <= usage_fraction <= 1.0:
        raise DomainError(f"usage fraction must be in [0, 1], got {usage_fraction}")
    if duration_hours < 0:
        raise DomainError(f"duration must be non-negative, got {duration_hours}")
    if computing_units < 1:
        raise DomainError(f"computing units must be >= 1, got {computing_units}")
    return usage_fraction * duration_hours * computing_units


@dataclass(frozen=True)
class ResourceSample:
    timestamp: float  # seconds, monotonic
    resident_memory_bytes: float
    cpu_busy_fraction: float


def time_weighted_mean(t: np.ndarray, v: np.ndarray) -> float:
    """Trapezoidal mean of a sampled signal; the plain value for a single sample."""
    if len(v) == 1 or t[-1] == t[0]:
        return float(np.mean(v))
    return float(np.trapezoid(v, t) / (t[-1] - t[0]))


@dataclass
class PhaseSummary:
    phase: str
    max_memory_gb: float
    avg_memory_gb: float
    core_hours: float
    wall_hours: float
    mean_busy_fraction: float
    n_samples: int
    warning: str | None = None


def summarize_samples(samples, phase: str, computing_units: int = 1, wall_seconds: float | None = None,
                      mean_busy: float | None = None) -> PhaseSummary:
    """Reduce a sample stream to peak/mean memory and core-hours for one phase.

    Wall time defaults to the span between first and last sample and the
    usage fraction to the time-weighted mean of the sampled busy fractions.
    """
    if not samples:
        return PhaseSummary(phase, 0.0, 0.0, 0.0, (wall_seconds or 0.0) / 3600, 0.0, 0, "no samples")
    t = np.array([s.timestamp for s in samples], dtype=np.float64)
    mem = np.array([s.resident_memory_bytes for s in samples], dtype=np.float64)
    busy = np.clip(np.array([s.cpu_busy_fraction for s in samples], dtype=np.float64), 0.0, 1.0)
    if wall_seconds is None:
        wall_seconds = float(t[-1] - t[0])
    if mean_busy is None:
        mean_busy = time_weighted_mean(t, busy)
    mean_busy = min(max(mean_busy, 0.0), 1.0)
    wall_h = wall_seconds / 3600.0
    return PhaseSummary(
        phase=phase,
        max_memory_gb=float(mem.max()) / GB,
        avg_memory_gb=time_weighted_mean(t, mem) / GB,
        core_hours=core_hours(mean_busy, wall_h, computing_units),
        wall_hours=wall_h,
        mean_busy_fraction=mean_busy,
        n_samples=len(samples),
    )


@dataclass
class EfficiencyReport:
    MaxMT: float = 0.0
    AvgMT: float = 0.0
    MaxMI: float = 0.0
    AvgMI: float = 0.0
    TotCT: float = 0.0
    TotCI: float = 0.0
    AvgET: float = 0.0
    TotTT: float = 0.0
    TotTI: float = 0.0
    usage_fraction: str = "mean-over-phase"
    warnings: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def efficiency_report(training: PhaseSummary | None, inference: PhaseSummary | None, epochs: int = 0) -> EfficiencyReport:
    rep = EfficiencyReport()
    if training is not None:
        rep.MaxMT, rep.AvgMT, rep.TotCT = training.max_memory_gb, training.avg_memory_gb, training.core_hours
        rep.TotTT = training.wall_hours
        rep.AvgET = rep.TotTT * 60.0 / epochs if epochs > 0 else 0.0
        if training.warning:
            rep.warnings.append(f"training: {training.warning}")
    if inference is not None:
        rep.MaxMI, rep.AvgMI, rep.TotCI = inference.max_memory_gb, inference.avg_memory_gb, inference.core_hours
        rep.TotTI = inference.wall_hours * 60.0
        if inference.warning:
            rep.warnings.append(f"inference: {inference.warning}")
    return rep


class ResourceMonitor:
    """Background sampler of process RSS and CPU busy fraction.

    Use as a context manager around one phase::

        with ResourceMonitor("training", interval_ms=200) as mon:
            fit(...)
        summary = mon.summary
    """

    def __init__(self, phase: str, interval_ms: int = 1000, computing_units: int = 1):
        import psutil

        self.phase = phase
        self.interval = interval_ms / 1000.0
        self.computing_units = computing_units
        self.samples: list[ResourceSample] = []
        self.summary: PhaseSummary | None = None
        self._proc = psutil.Process()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._start = 0.0
        self._cpu_start = 0.0

    def _sample(self, last):
        now = time.monotonic()
        cpu = self._proc.cpu_times()
        used = cpu.user + cpu.system
        busy = 0.0
        if last is not None and now > last[0]:
            busy = (used - last[1]) / ((now - last[0]) * self.computing_units)
        self.samples.append(ResourceSample(now, float(self._proc.memory_info().rss), min(max(busy, 0.0), 1.0)))
        return now, used

    def _run(self):
        last = self._sample(None)
        while not self._stop.wait(self.interval):
            last = self._sample(last)
        self._sample(last)

    def _cpu(self) -> float:
        c = self._proc.cpu_times()
        return c.user + c.system

    def __enter__(self):
        self._start = time.monotonic()
        self._cpu_start = self._cpu()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        wall = time.monotonic() - self._start
        busy = (self._cpu() - self._cpu_start) / (wall * self.computing_units) if wall > 0 else 0.0
        summary = summarize_samples(self.samples, self.phase, self.computing_units, wall_seconds=wall, mean_busy=busy)
        if len(self.samples) < 2:
            warnings.warn(f"{self.phase}: fewer than two resource samples", RuntimeWarning)
        self.summary = summary
        return False
