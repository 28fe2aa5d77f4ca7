"""Clip construction: temporal downsampling, spatial downscaling, sliding
windows of frame differences, and training-set curation.

The detector consumes fixed-length clips of consecutive-sample differences,
normalized to [0, 1]. Windows are planned in wall-clock time (a window exists
when it fits entirely inside the night) and realized on the downsampled grid.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, ValidationError
from .video_io import Frame, NightRecord

_TIME_EPS = 1e-9

CLIP_MAGIC = b"SLC1"
_CLIP_HEADER = struct.Struct("<4sIHHB3s")  # magic, T_d, H, W, label, pad
_LABEL_CODES = {"nonRA": 0, "RA": 1, None: 255}
_LABEL_NAMES = {0: "nonRA", 1: "RA", 255: None}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class WindowPlan:
    """Sliding-window layout and clip geometry."""

    window_s: float = 60.0
    step_s: float = 30.0
    fps_target: float = 2.5
    clip_w: int = 160
    clip_h: int = 120

    def __post_init__(self):
        if self.window_s <= 0:
            raise ConfigurationError(f"window_s must be positive, got {self.window_s}")
        if not 0 < self.step_s <= self.window_s:
            raise ConfigurationError(
                f"step_s must satisfy 0 < step_s <= window_s, got {self.step_s}"
            )
        if self.fps_target <= 0:
            raise ConfigurationError(f"fps_target must be positive, got {self.fps_target}")
        if self.clip_w <= 0 or self.clip_h <= 0:
            raise ConfigurationError(
                f"clip dimensions must be positive, got {self.clip_w}x{self.clip_h}"
            )
        if self.samples_per_window < 2:
            raise ConfigurationError(
                f"window of {self.window_s}s at {self.fps_target} FPS holds fewer than 2 samples"
            )

    @property
    def samples_per_window(self) -> int:
        return _round_half_up(self.window_s * self.fps_target)

    @property
    def diffs_per_clip(self) -> int:
        return self.samples_per_window - 1


@dataclass(eq=False)
class Clip:
    """A window of consecutive-sample difference images, values in [0, 1]."""

    start_s: float
    diffs: np.ndarray  # (T_d, H, W) float32
    label: str | None = None

    def __post_init__(self):
        self.diffs = np.asarray(self.diffs, dtype=np.float32)
        if self.diffs.ndim != 3:
            raise ValidationError(f"clip diffs must be 3-D, got shape {self.diffs.shape}")
        if self.label not in _LABEL_CODES:
            raise ValidationError(f"clip label must be 'RA', 'nonRA', or None, got {self.label!r}")

    @property
    def t_d(self) -> int:
        return self.diffs.shape[0]


def downsample_stream(night: NightRecord, fps_target: float) -> NightRecord:
    """Keep frames at indices round(k * fps/fps_target); timestamps are preserved."""
    fps = night.meta.fps
    if fps_target <= 0:
        raise ConfigurationError(f"fps_target must be positive, got {fps_target}")
    if fps_target > fps + 1e-12:
        raise ConfigurationError(f"fps_target {fps_target} exceeds source fps {fps}")
    ratio = fps / fps_target
    n = night.n_frames

    if ratio == 1.0:
        return replace(night, meta=replace(night.meta, fps=fps_target))

    n_kept = _round_half_up((n - 0.5) / ratio - 0.5) + 1
    while n_kept > 0 and _round_half_up((n_kept - 1) * ratio) >= n:
        n_kept -= 1
    while _round_half_up(n_kept * ratio) < n:
        n_kept += 1

    def frames() -> Iterator[Frame]:
        k = 0
        target = 0
        for i, frame in enumerate(night.frames()):
            if i == target:
                yield frame
                k += 1
                target = _round_half_up(k * ratio)
        assert k == n_kept, f"downsample produced {k} frames, planned {n_kept}"

    return NightRecord(
        meta=replace(night.meta, fps=fps_target),
        n_frames=n_kept,
        frames_factory=frames,
        annotations=night.annotations,
        path=night.path,
    )


@lru_cache(maxsize=64)
def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of box-filter overlap fractions."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        lo = i * scale
        hi = (i + 1) * scale
        for j in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                w[i, j] = overlap / scale
    return w


def downscale_array(arr: np.ndarray, clip_w: int, clip_h: int) -> np.ndarray:
    """Area-average (box filter) downscale of a uint8 image, round-half-up."""
    if clip_w <= 0 or clip_h <= 0:
        raise ConfigurationError(f"target dimensions must be positive, got {clip_w}x{clip_h}")
    h_in, w_in = arr.shape
    if clip_h > h_in or clip_w > w_in:
        raise ConfigurationError(
            f"target {clip_w}x{clip_h} exceeds source {w_in}x{h_in}; only downscaling is supported"
        )
    if (h_in, w_in) == (clip_h, clip_w):
        return arr
    if h_in % clip_h == 0 and w_in % clip_w == 0:
        bh = h_in // clip_h
        bw = w_in // clip_w
        sums = arr.reshape(clip_h, bh, clip_w, bw).astype(np.int64).sum(axis=(1, 3))
        area = bh * bw
        return ((2 * sums + area) // (2 * area)).astype(np.uint8)
    rows = _area_weights(h_in, clip_h)
    cols = _area_weights(w_in, clip_w)
    means = rows @ arr.astype(np.float64) @ cols.T
    return np.floor(means + 0.5).clip(0, 255).astype(np.uint8)


def spatial_downscale(frame: Frame, clip_w: int, clip_h: int) -> Frame:
    return Frame(pixels=downscale_array(frame.pixels, clip_w, clip_h), t=frame.t)


def window_starts(duration_s: float, plan: WindowPlan) -> list[float]:
    """Start times of all windows fully inside [0, duration_s).

    The count equals floor((duration - window) / step) + 1 whenever the night
    is at least one window long, and 0 otherwise.
    """
    eps = _TIME_EPS * max(1.0, abs(duration_s))
    starts = []
    k = 0
    while k * plan.step_s + plan.window_s <= duration_s + eps:
        starts.append(k * plan.step_s)
        k += 1
    return starts


def _window_sample_starts(duration_s: float, n_samples: int, plan: WindowPlan) -> list[tuple[float, int]]:
    spw = plan.samples_per_window
    if n_samples < spw:
        return []
    out = []
    for start_s in window_starts(duration_s, plan):
        j = _round_half_up(start_s * plan.fps_target)
        j = min(max(j, 0), n_samples - spw)
        out.append((start_s, j))
    return out


def _extract_sample_windows(
    samples: Iterator[np.ndarray], starts: Sequence[int], length: int
) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (start, stacked samples) for each start, in order, over one pass.

    ``starts`` must be sorted ascending; duplicates are allowed. Buffers at
    most one window plus the gap to the next start.
    """
    buf: dict[int, np.ndarray] = {}
    next_i = 0
    for j, arr in enumerate(samples):
        if next_i >= len(starts):
            break
        if j >= starts[next_i]:
            buf[j] = arr
        while next_i < len(starts) and starts[next_i] + length - 1 <= j:
            a = starts[next_i]
            yield a, np.stack([buf[a + off] for off in range(length)])
            next_i += 1
            if next_i < len(starts):
                for idx in [i for i in buf if i < starts[next_i]]:
                    del buf[idx]


def _diffs_from_samples(stack: np.ndarray) -> np.ndarray:
    d = np.abs(np.diff(stack.astype(np.int16), axis=0))
    return (d.astype(np.float32)) / 255.0


def build_windows(night: NightRecord, plan: WindowPlan) -> Iterator[Clip]:
    """Stream detector-ready clips for every window that fits in the night."""
    ds = downsample_stream(night, plan.fps_target)
    planned = _window_sample_starts(night.duration_s, ds.n_frames, plan)
    if not planned:
        return
    starts = [j for _, j in planned]
    start_seconds = {i: s for i, (s, _) in enumerate(planned)}

    def sample_arrays() -> Iterator[np.ndarray]:
        for frame in ds.frames():
            yield downscale_array(frame.pixels, plan.clip_w, plan.clip_h)

    for i, (_, stack) in enumerate(_extract_sample_windows(sample_arrays(), starts, plan.samples_per_window)):
        yield Clip(start_s=start_seconds[i], diffs=_diffs_from_samples(stack), label=None)


@dataclass
class CurationResult:
    clips: list[Clip]
    patient_ids: list[str]
    n_positive: int
    n_negative: int
    n_skipped: int


SEGMENT_S = 600.0  # negatives: one clip per RA-free 10-minute segment
MIN_PRE_AROUSAL_S = 15.0


def curate_training_clips(
    nights: Sequence[NightRecord], plan: WindowPlan, seed: int
) -> CurationResult:
    """Select labeled training clips from annotated nights.

    Negatives: for every non-overlapping 10-minute segment without an RA
    onset, one clip at a seeded-uniform offset inside the segment. Positives:
    for every RA onset with at least 15 s of preceding footage, one clip
    starting onset - o with o seeded-uniform in [15 s, window_s - 1 s].
    Onsets without room for that window are skipped and counted.
    """
    clips: list[Clip] = []
    patient_ids: list[str] = []
    n_pos = n_neg = n_skipped = 0
    f = plan.fps_target

    for ni, night in enumerate(nights):
        if night.annotations is None:
            raise ValidationError(f"night {ni} ({night.meta.patient_id}) has no annotations")
        ds = downsample_stream(night, f)
        n_samples = ds.n_frames
        spw = plan.samples_per_window
        duration = night.duration_s
        rng_neg = np.random.default_rng(np.random.SeedSequence([seed, ni, 0]))
        rng_pos = np.random.default_rng(np.random.SeedSequence([seed, ni, 1]))
        ra_onsets = [e.start_s for e in night.annotations if e.kind == "RA"]

        picks: list[tuple[int, str]] = []
        seg = 0
        while (seg + 1) * SEGMENT_S <= duration + _TIME_EPS:
            lo = seg * SEGMENT_S
            hi = lo + SEGMENT_S
            seg += 1
            if any(lo <= t < hi for t in ra_onsets):
                continue
            j_lo = max(0, int(math.ceil(lo * f - _TIME_EPS)))
            j_hi = min(int(math.floor((hi - plan.window_s) * f + _TIME_EPS)), n_samples - spw)
            if j_hi < j_lo:
                continue
            j = j_lo + int(rng_neg.integers(0, j_hi - j_lo + 1))
            picks.append((j, "nonRA"))
            n_neg += 1

        for t_on in ra_onsets:
            j_lo = max(0, int(math.ceil((t_on - (plan.window_s - 1.0)) * f - _TIME_EPS)))
            j_hi = min(
                int(math.floor((t_on - MIN_PRE_AROUSAL_S) * f + _TIME_EPS)),
                n_samples - spw,
            )
            if t_on < MIN_PRE_AROUSAL_S or j_hi < j_lo:
                n_skipped += 1
                continue
            j = j_lo + int(rng_pos.integers(0, j_hi - j_lo + 1))
            picks.append((j, "RA"))
            n_pos += 1

        order = sorted(range(len(picks)), key=lambda i: picks[i][0])
        sorted_starts = [picks[i][0] for i in order]

        def sample_arrays() -> Iterator[np.ndarray]:
            for frame in ds.frames():
                yield downscale_array(frame.pixels, plan.clip_w, plan.clip_h)

        night_clips: list[Clip | None] = [None] * len(picks)
        extracted = _extract_sample_windows(sample_arrays(), sorted_starts, spw)
        for oi, (a, stack) in zip(order, extracted):
            night_clips[oi] = Clip(
                start_s=a / f, diffs=_diffs_from_samples(stack), label=picks[oi][1]
            )
        if any(c is None for c in night_clips):
            raise ValidationError(
                f"night {ni}: frame stream ended before all planned clips were read"
            )
        clips.extend(night_clips)
        patient_ids.extend([night.meta.patient_id] * len(night_clips))

    return CurationResult(
        clips=clips,
        patient_ids=patient_ids,
        n_positive=n_pos,
        n_negative=n_neg,
        n_skipped=n_skipped,
    )


def write_clip(path: str | Path, clip: Clip) -> None:
    """One clip as a binary blob: 16-byte header + little-endian float32 diffs."""
    t_d, h, w = clip.diffs.shape
    header = _CLIP_HEADER.pack(CLIP_MAGIC, t_d, h, w, _LABEL_CODES[clip.label], b"\x00" * 3)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(clip.diffs, dtype="<f4").tobytes())


def read_clip_header(path: str | Path) -> tuple[int, int, int, str | None]:
    with open(path, "rb") as fh:
        raw = fh.read(_CLIP_HEADER.size)
    if len(raw) != _CLIP_HEADER.size:
        raise FormatError(f"{path}: truncated clip header")
    magic, t_d, h, w, label_code, _ = _CLIP_HEADER.unpack(raw)
    if magic != CLIP_MAGIC:
        raise FormatError(f"{path}: bad clip magic {magic!r}")
    if label_code not in _LABEL_NAMES:
        raise FormatError(f"{path}: unknown label code {label_code}")
    return t_d, h, w, _LABEL_NAMES[label_code]


def read_clip(path: str | Path, start_s: float = 0.0) -> Clip:
    t_d, h, w, label = read_clip_header(path)
    expected = t_d * h * w * 4
    with open(path, "rb") as fh:
        fh.seek(_CLIP_HEADER.size)
        raw = fh.read()
    if len(raw) != expected:
        raise FormatError(f"{path}: clip payload has {len(raw)} bytes, expected {expected}")
    diffs = np.frombuffer(raw, dtype="<f4").reshape(t_d, h, w).astype(np.float32)
    return Clip(start_s=start_s, diffs=diffs, label=label)


class ClipStore:
    """Directory of clip blobs with a manifest; lazy, indexable clip access."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest = self.root / "manifest.json"
        if manifest.is_file():
            try:
                entries = json.loads(manifest.read_text())
            except json.JSONDecodeError as e:
                raise FormatError(f"{manifest}: {e}") from None
            self.entries = entries
        else:
            self.entries = [
                {"file": p.name, "start_s": 0.0, "patient_id": "", "night": ""}
                for p in sorted(self.root.glob("*.slc"))
            ]
        if not self.entries:
            raise FormatError(f"{self.root}: no clips found")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> Clip:
        e = self.entries[i]
        return read_clip(self.root / e["file"], start_s=float(e.get("start_s", 0.0)))

    @property
    def labels(self) -> list[str | None]:
        return [read_clip_header(self.root / e["file"])[3] for e in self.entries]

    @property
    def patient_ids(self) -> list[str]:
        return [str(e.get("patient_id", "")) for e in self.entries]


def write_clip_dir(
    clips: Sequence[Clip],
    root: str | Path,
    patient_ids: Sequence[str] | None = None,
    nights: Sequence[str] | None = None,
) -> ClipStore:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, clip in enumerate(clips):
        name = f"clip_{i:05d}.slc"
        write_clip(root / name, clip)
        entries.append(
            {
                "file": name,
                "start_s": clip.start_s,
                "label": clip.label,
                "patient_id": patient_ids[i] if patient_ids else "",
                "night": nights[i] if nights else "",
            }
        )
    (root / "manifest.json").write_text(json.dumps(entries, indent=2) + "\n")
    return ClipStore(root)
