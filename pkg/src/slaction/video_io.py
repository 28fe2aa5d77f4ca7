"""Night ingestion: PGM frame sequences, night metadata, and event annotations.

A night on disk is a directory of binary 8-bit grayscale PGM (P5) files named
``frame_%06d.pgm`` plus a ``meta.json``, with an optional ``annotations.json``
next to them. Frames are exposed as a lazy, timestamp-ordered stream.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import (
    EmptyNightError,
    FormatError,
    OrderingError,
    ValidationError,
)

EVENT_KINDS = ("Apnea", "Hypopnea", "Desaturation", "RA", "SA", "PLMA", "Wake")

RESPIRATORY_KINDS = ("Apnea", "Hypopnea", "Desaturation")
AROUSAL_KINDS = ("RA", "SA", "PLMA", "Wake")

_FRAME_RE = re.compile(r"^frame_(\d{6})\.pgm$")


@dataclass(eq=False)
class Frame:
    """One grayscale frame: a (height, width) uint8 array plus its timestamp."""

    pixels: np.ndarray
    t: float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8:
            raise ValidationError(f"frame pixels must be uint8, got {self.pixels.dtype}")
        if self.pixels.ndim != 2:
            raise ValidationError(f"frame pixels must be 2-D, got shape {self.pixels.shape}")
        if self.t < 0:
            raise ValidationError(f"frame timestamp must be non-negative, got {self.t}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class NightMeta:
    fps: float
    width: int
    height: int
    tib_s: float
    patient_id: str

    def __post_init__(self):
        if self.fps <= 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"frame dimensions must be positive, got {self.width}x{self.height}")
        if self.tib_s <= 0:
            raise ValidationError(f"tib_s must be positive, got {self.tib_s}")


@dataclass(frozen=True)
class EventAnnotation:
    kind: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValidationError(f"unknown event kind {self.kind!r}")
        if not 0 <= self.start_s < self.end_s:
            raise ValidationError(
                f"event must satisfy 0 <= start < end, got [{self.start_s}, {self.end_s}]"
            )

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(eq=False)
class NightRecord:
    """A night's frame source plus metadata and optional annotations.

    ``frames_factory`` returns a fresh single-consumer iterator each call, so a
    record can be re-read. Records may be handed across threads but one
    iterator must not be shared between readers.
    """

    meta: NightMeta
    n_frames: int
    frames_factory: Callable[[], Iterator[Frame]]
    annotations: list[EventAnnotation] | None = None
    path: Path | None = None

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.meta.fps

    @property
    def tib_h(self) -> float:
        return self.meta.tib_s / 3600.0

    def frames(self) -> Iterator[Frame]:
        return self.frames_factory()


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary (P5) PGM with maxval 255 into a (h, w) uint8 array."""
    data = Path(path).read_bytes()

    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            c = data[pos : pos + 1]
            if c == b"#":
                nl = data.find(b"\n", pos)
                pos = len(data) if nl < 0 else nl + 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        return data[start:pos]

    if next_token() != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as e:
        raise FormatError(f"{path}: bad PGM header: {e}") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: bad PGM dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255, got {maxval}")
    pos += 1  # single whitespace byte separates header from raster
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {width * height}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise ValidationError(f"PGM pixels must be 2-D, got shape {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(pixels.tobytes())


def _meta_from_dict(d: dict, n_frames: int, source: str) -> NightMeta:
    for key in ("fps", "width", "height", "patient_id"):
        if key not in d:
            raise FormatError(f"{source}: missing required key {key!r}")
    try:
        fps = float(d["fps"])
        width = int(d["width"])
        height = int(d["height"])
        patient_id = str(d["patient_id"])
        tib_s = float(d["tib_s"]) if d.get("tib_s") is not None else n_frames / fps
    except (TypeError, ValueError) as e:
        raise FormatError(f"{source}: bad meta value: {e}") from None
    meta = NightMeta(fps=fps, width=width, height=height, tib_s=tib_s, patient_id=patient_id)
    if "tib_s" in d and d["tib_s"] is not None and n_frames > 1:
        if meta.tib_s < (n_frames - 1) / meta.fps:
            raise ValidationError(
                f"{source}: tib_s={meta.tib_s} shorter than the recording span "
                f"{(n_frames - 1) / meta.fps:.3f}s"
            )
    return meta


def open_night(path: str | Path) -> NightRecord:
    """Open a night directory as a lazily-read, timestamp-ordered frame source."""
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise FormatError(f"{root}: missing meta.json")
    try:
        raw_meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{meta_path}: unreadable meta.json: {e}") from None
    if not isinstance(raw_meta, dict):
        raise FormatError(f"{meta_path}: meta.json must hold a JSON object")

    entries = []
    for p in root.glob("frame_*.pgm"):
        m = _FRAME_RE.match(p.name)
        if m is None:
            raise FormatError(f"{p}: frame file does not match frame_%06d.pgm")
        entries.append((int(m.group(1)), p))
    entries.sort()
    if not entries:
        raise EmptyNightError(f"{root}: night contains no frames")
    indices = [i for i, _ in entries]
    if indices != list(range(len(entries))):
        raise OrderingError(f"{root}: frame indices are not contiguous from 0: {indices[:8]}...")

    n_frames = len(entries)
    meta = _meta_from_dict(raw_meta, n_frames, str(meta_path))
    files = [p for _, p in entries]

    def frames() -> Iterator[Frame]:
        for i, p in enumerate(files):
            pixels = read_pgm(p)
            if pixels.shape != (meta.height, meta.width):
                raise FormatError(
                    f"{p}: frame is {pixels.shape[1]}x{pixels.shape[0]}, "
                    f"meta declares {meta.width}x{meta.height}"
                )
            yield Frame(pixels=pixels, t=i / meta.fps)

    annotations = None
    ann_path = root / "annotations.json"
    if ann_path.is_file():
        annotations = load_annotations(ann_path)

    return NightRecord(
        meta=meta,
        n_frames=n_frames,
        frames_factory=frames,
        annotations=annotations,
        path=root,
    )


def load_annotations(path: str | Path) -> list[EventAnnotation]:
    """Parse an annotation JSON file into events sorted by start time."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable annotations: {e}") from None
    if not isinstance(raw, list):
        raise FormatError(f"{path}: annotations must be a JSON array")
    events = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise FormatError(f"{path}[{i}]: annotation entries must be objects")
        missing = {"kind", "start_s", "end_s"} - set(entry)
        if missing:
            raise FormatError(f"{path}[{i}]: missing keys {sorted(missing)}")
        try:
            kind = str(entry["kind"])
            start_s = float(entry["start_s"])
            end_s = float(entry["end_s"])
        except (TypeError, ValueError) as e:
            raise FormatError(f"{path}[{i}]: bad annotation value: {e}") from None
        events.append(EventAnnotation(kind=kind, start_s=start_s, end_s=end_s))
    events.sort(key=lambda e: (e.start_s, e.end_s, e.kind))
    return events


def save_annotations(path: str | Path, events: Iterable[EventAnnotation]) -> None:
    payload = [
        {"kind": e.kind, "start_s": e.start_s, "end_s": e.end_s}
        for e in sorted(events, key=lambda e: (e.start_s, e.end_s, e.kind))
    ]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_night(
    path: str | Path,
    meta: NightMeta,
    frames: Iterable[Frame | np.ndarray],
    annotations: Iterable[EventAnnotation] | None = None,
) -> int:
    """Write a frame sequence to the on-disk night layout. Returns frame count."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    n = 0
    for frame in frames:
        pixels = frame.pixels if isinstance(frame, Frame) else frame
        write_pgm(root / f"frame_{n:06d}.pgm", pixels)
        n += 1
    payload = {
        "fps": meta.fps,
        "width": meta.width,
        "height": meta.height,
        "tib_s": meta.tib_s,
        "patient_id": meta.patient_id,
    }
    (root / "meta.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if annotations is not None:
        save_annotations(root / "annotations.json", annotations)
    return n
