"""Difference images and large-difference-pixel (LDP) statistics.

Motion shows up as pixels whose absolute frame-to-frame difference exceeds a
threshold; counting those per difference image and aggregating per event kind
separates arousal/wake motion from the near-still respiratory events.
"""

from __future__ import annotations

import csv
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError
from .video_io import EVENT_KINDS, EventAnnotation, Frame, NightRecord

DEFAULT_TAU = 20

_TIME_EPS = 1e-9


@dataclass(eq=False)
class DifferenceImage:
    """Pixel-wise |a - b| of two equally sized frames, stamped with the later time."""

    values: np.ndarray
    t: float

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LdpThreshold:
    """Intensity threshold on the 8-bit scale; a pixel is an LDP when value > tau."""

    tau: int = DEFAULT_TAU

    def __post_init__(self):
        if not isinstance(self.tau, (int, np.integer)) or isinstance(self.tau, bool):
            raise ValidationError(f"tau must be an integer, got {self.tau!r}")
        if not 1 <= self.tau <= 255:
            raise ValidationError(f"tau must lie in [1, 255], got {self.tau}")


@dataclass
class EventLdpStats:
    """Per-kind LDP summary: mean LDPs per difference image over the selected spans."""

    kind: str
    mean_ldp: float
    n_images: int
    series: list[int] | None = None
    n_clipped: int = 0


def _coerce_tau(tau: int | LdpThreshold) -> int:
    if isinstance(tau, LdpThreshold):
        return tau.tau
    return LdpThreshold(tau).tau


def difference_image(a: Frame, b: Frame) -> DifferenceImage:
    """Absolute per-pixel difference of two frames of one night."""
    if a.pixels.shape != b.pixels.shape:
        raise ShapeError(f"frame shapes differ: {a.pixels.shape} vs {b.pixels.shape}")
    if not a.t < b.t:
        raise ValidationError(f"frames must be time-ordered, got t={a.t} then t={b.t}")
    values = np.abs(a.pixels.astype(np.int16) - b.pixels.astype(np.int16)).astype(np.uint8)
    return DifferenceImage(values=values, t=b.t)


def count_ldp(d: DifferenceImage, tau: int | LdpThreshold) -> int:
    """Number of pixels strictly exceeding the threshold."""
    return int(np.count_nonzero(d.values > _coerce_tau(tau)))


def _ldp_count_series(night: NightRecord, tau: int) -> tuple[np.ndarray, np.ndarray]:
    """One pass over consecutive native-rate frames: per-diff LDP counts and timestamps."""
    counts: list[int] = []
    times: list[float] = []
    prev: np.ndarray | None = None
    for frame in night.frames():
        cur = frame.pixels.astype(np.int16)
        if prev is not None:
            counts.append(int(np.count_nonzero(np.abs(cur - prev) > tau)))
            times.append(frame.t)
        prev = cur
    return np.asarray(counts, dtype=np.int64), np.asarray(times, dtype=np.float64)


def event_ldp_stats(
    night: NightRecord,
    events: list[EventAnnotation],
    tau: int | LdpThreshold = DEFAULT_TAU,
    mode: str = "within",
    window_s: float = 10.0,
) -> list[EventLdpStats]:
    """Aggregate LDP counts per event kind.

    ``within`` averages over difference images timestamped inside
    [start_s, end_s]; ``pre`` averages over [start_s - window_s, start_s),
    clipping (and flagging) windows that would begin before the night starts.
    """
    if mode not in ("within", "pre"):
        raise ValidationError(f"mode must be 'within' or 'pre', got {mode!r}")
    if mode == "pre" and window_s <= 0:
        raise ValidationError(f"pre-event window must be positive, got {window_s}")
    tau_v = _coerce_tau(tau)
    span = max(night.duration_s, night.meta.tib_s)
    for e in events:
        if e.end_s > span + _TIME_EPS:
            raise ValidationError(
                f"event [{e.start_s}, {e.end_s}] extends past the night span {span:.3f}s"
            )

    counts, times = _ldp_count_series(night, tau_v)

    per_kind: dict[str, EventLdpStats] = {}
    for e in events:
        if mode == "within":
            lo, hi = e.start_s, e.end_s
            i0 = bisect_left(times, lo - _TIME_EPS)
            i1 = bisect_right(times, hi + _TIME_EPS)
            clipped = False
        else:
            lo = e.start_s - window_s
            clipped = lo < 0
            lo = max(lo, 0.0)
            i0 = bisect_left(times, lo - _TIME_EPS)
            i1 = bisect_left(times, e.start_s - _TIME_EPS)
        segment = counts[i0:i1]
        stats = per_kind.get(e.kind)
        if stats is None:
            stats = EventLdpStats(kind=e.kind, mean_ldp=0.0, n_images=0, series=[])
            per_kind[e.kind] = stats
        stats.series.extend(int(c) for c in segment)
        stats.n_images += len(segment)
        if clipped:
            stats.n_clipped += 1

    out = []
    for kind in EVENT_KINDS:
        if kind not in per_kind:
            continue
        stats = per_kind[kind]
        stats.mean_ldp = float(np.mean(stats.series)) if stats.n_images else 0.0
        out.append(stats)
    return out


def write_ldp_stats_csv(stats: list[EventLdpStats], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["kind", "n_images", "mean_ldp"])
        for s in stats:
            writer.writerow([s.kind, s.n_images, f"{s.mean_ldp:.6f}"])
