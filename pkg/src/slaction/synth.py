"""Synthetic sleep nights with known ground truth.

A night is a static bedroom background plus a parametric motion model:
sinusoidal breathing in a chest region (suppressed during apneas, halved
during hypopneas), short large-motion bursts for arousals, sustained
whole-body motion while awake, periodic limb bursts, sensor noise, and a
static mosaic rectangle standing in for face anonymization. Every draw is
seeded, so generation is bit-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, ValidationError
from .video_io import (
    EventAnnotation,
    Frame,
    NightMeta,
    NightRecord,
    open_night,
    save_annotations,
    write_night,
)

RA_FOLLOWS_RESP_WITHIN_S = 3.0
SA_CLEAN_PREFIX_S = 30.0
OSA_TRUE_THRESHOLD = 15.0


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValidationError(f"rect must have positive size, got {self.w}x{self.h}")

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    @property
    def area(self) -> int:
        return self.w * self.h


def default_layout(width: int, height: int) -> dict[str, Rect]:
    def r(fx, fy, fw, fh):
        return Rect(
            x=int(round(fx * width)),
            y=int(round(fy * height)),
            w=max(1, int(round(fw * width))),
            h=max(1, int(round(fh * height))),
        )

    return {
        "body": r(0.20, 0.18, 0.60, 0.74),
        "torso": r(0.25, 0.30, 0.37, 0.40),
        "chest": r(0.30, 0.38, 0.25, 0.18),
        "limb_l": r(0.28, 0.72, 0.14, 0.18),
        "limb_r": r(0.46, 0.72, 0.14, 0.18),
        "mosaic": r(0.36, 0.04, 0.14, 0.12),
    }


@dataclass(frozen=True)
class BreathingSpec:
    amplitude: float = 80.0
    period_s: float = 4.0
    rect: Rect | None = None  # None: layout default chest rect

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValidationError(f"breathing amplitude must be >= 0, got {self.amplitude}")
        if self.period_s <= 0:
            raise ValidationError(f"breathing period must be positive, got {self.period_s}")


@dataclass(frozen=True)
class MotionMagnitudes:
    ra_burst: float = 60.0
    sa_burst: float = 60.0
    plma_burst: float = 50.0
    wake_sustained: float = 60.0


@dataclass(frozen=True)
class EventCounts:
    apnea: int = 0
    hypopnea: int = 0
    ra: int = 0
    sa: int = 0
    plma: int = 0
    wake: int = 0

    def __post_init__(self):
        for name in ("apnea", "hypopnea", "ra", "sa", "plma", "wake"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} count must be >= 0")
        if self.ra > self.apnea + self.hypopnea:
            raise ValidationError(
                f"{self.ra} arousals cannot follow {self.apnea + self.hypopnea} respiratory events"
            )


@dataclass(frozen=True)
class EventRates:
    """Per-hour event rates used when no explicit plan or counts are given."""

    apnea_per_h: float = 12.0
    hypopnea_per_h: float = 6.0
    ra_fraction: float = 0.75
    sa_per_h: float = 3.0
    plma_per_h: float = 1.5
    wake_per_h: float = 1.5
    desat_fraction: float = 0.5


@dataclass(frozen=True)
class SynthConfig:
    duration_s: float = 1200.0
    fps: float = 5.0
    width: int = 320
    height: int = 240
    seed: int = 0
    breathing: BreathingSpec = field(default_factory=BreathingSpec)
    events: tuple[EventAnnotation, ...] | None = None
    counts: EventCounts | None = None
    rates: EventRates = field(default_factory=EventRates)
    magnitudes: MotionMagnitudes = field(default_factory=MotionMagnitudes)
    noise_sigma: float = 2.0
    mosaic: Rect | None = None  # None: layout default
    plma_period_s: float = 1.5
    plma_duty: float = 0.5
    patient_id: str | None = None

    def __post_init__(self):
        if self.duration_s <= 0 or self.fps <= 0:
            raise ValidationError("duration_s and fps must be positive")
        if self.width < 16 or self.height < 16:
            raise ValidationError(f"frame size too small: {self.width}x{self.height}")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 < self.plma_duty <= 1:
            raise ValidationError(f"plma_duty must lie in (0, 1], got {self.plma_duty}")
        if self.events is not None and self.counts is not None:
            raise ValidationError("give an explicit event plan or counts, not both")

    @property
    def tib_s(self) -> float:
        return self.duration_s

    @property
    def tib_h(self) -> float:
        return self.duration_s / 3600.0

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * self.fps))


@dataclass
class GroundTruth:
    annotations: list[EventAnnotation]
    true_ahi: float
    osa_true: bool

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.annotations:
            out[e.kind] = out.get(e.kind, 0) + 1
        return out


def ground_truth_ahi(annotations: Sequence[EventAnnotation], tib_h: float) -> float:
    """Apnea plus hypopnea events per hour in bed."""
    if tib_h <= 0:
        raise ValidationError(f"tib_h must be positive, got {tib_h}")
    n = sum(1 for e in annotations if e.kind in ("Apnea", "Hypopnea"))
    return n / tib_h


def validate_plan(events: Sequence[EventAnnotation], duration_s: float) -> None:
    """Check the structural invariants every event plan must satisfy."""
    by_kind: dict[str, list[EventAnnotation]] = {}
    for e in events:
        if e.end_s > duration_s + 1e-9:
            raise ValidationError(f"event {e.kind} [{e.start_s}, {e.end_s}] ends past {duration_s}s")
        by_kind.setdefault(e.kind, []).append(e)
    for kind, evs in by_kind.items():
        evs = sorted(evs, key=lambda e: e.start_s)
        for a, b in zip(evs, evs[1:]):
            if b.start_s < a.end_s - 1e-9:
                raise ValidationError(
                    f"overlapping {kind} events: [{a.start_s}, {a.end_s}] and [{b.start_s}, {b.end_s}]"
                )
    resp = sorted(
        (e for e in events if e.kind in ("Apnea", "Hypopnea")), key=lambda e: e.start_s
    )
    for ra in by_kind.get("RA", []):
        ok = any(0 <= ra.start_s - r.end_s <= RA_FOLLOWS_RESP_WITHIN_S + 1e-9 for r in resp)
        if not ok:
            raise ValidationError(
                f"RA at {ra.start_s}s has no apnea/hypopnea ending within the prior "
                f"{RA_FOLLOWS_RESP_WITHIN_S}s"
            )
    for sa in by_kind.get("SA", []):
        lo = sa.start_s - SA_CLEAN_PREFIX_S
        for r in resp:
            if r.start_s < sa.start_s and r.end_s > lo + 1e-9:
                raise ValidationError(
                    f"SA at {sa.start_s}s has a respiratory event within the prior "
                    f"{SA_CLEAN_PREFIX_S}s"
                )


def _counts_from_rates(rates: EventRates, tib_h: float) -> EventCounts:
    n_apnea = int(round(rates.apnea_per_h * tib_h))
    n_hyp = int(round(rates.hypopnea_per_h * tib_h))
    n_ra = min(int(round(rates.ra_fraction * (n_apnea + n_hyp))), n_apnea + n_hyp)
    return EventCounts(
        apnea=n_apnea,
        hypopnea=n_hyp,
        ra=n_ra,
        sa=int(round(rates.sa_per_h * tib_h)),
        plma=int(round(rates.plma_per_h * tib_h)),
        wake=int(round(rates.wake_per_h * tib_h)),
    )


_MIN_GAP_S = 4.0


def plan_events(cfg: SynthConfig) -> list[EventAnnotation]:
    """The night's event plan: explicit, from counts, or from rates; validated."""
    if cfg.events is not None:
        events = sorted(cfg.events, key=lambda e: (e.start_s, e.kind))
        validate_plan(events, cfg.duration_s)
        return list(events)
    counts = cfg.counts if cfg.counts is not None else _counts_from_rates(cfg.rates, cfg.tib_h)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))

    resp_kinds = ["Apnea"] * counts.apnea + ["Hypopnea"] * counts.hypopnea
    ra_slots: set[int] = set()
    if counts.ra:
        ra_slots = set(int(i) for i in rng.choice(len(resp_kinds), size=counts.ra, replace=False))

    blocks: list[dict] = []
    for i, kind in enumerate(resp_kinds):
        b: dict = {"type": "resp", "kind": kind, "dur": float(rng.uniform(10.0, 22.0))}
        b["desat"] = kind == "Apnea" and float(rng.uniform()) < cfg.rates.desat_fraction
        if i in ra_slots:
            b["ra_delay"] = float(rng.uniform(0.5, 2.5))
            b["ra_dur"] = float(rng.uniform(5.0, 10.0))
        blocks.append(b)
    for _ in range(counts.sa):
        blocks.append({"type": "SA", "dur": float(rng.uniform(5.0, 10.0))})
    for _ in range(counts.plma):
        blocks.append({"type": "PLMA", "dur": float(rng.uniform(12.0, 20.0))})
    for _ in range(counts.wake):
        blocks.append({"type": "Wake", "dur": float(rng.uniform(20.0, 40.0))})

    def block_len(b: dict) -> float:
        if b["type"] == "resp":
            return b["dur"] + (b.get("ra_delay", 0.0) + b.get("ra_dur", 0.0))
        if b["type"] == "SA":
            return SA_CLEAN_PREFIX_S + b["dur"]
        return b["dur"]

    order = [int(i) for i in rng.permutation(len(blocks))]
    total = sum(block_len(b) for b in blocks) + _MIN_GAP_S * (len(blocks) + 1)
    if total > cfg.duration_s:
        raise ConfigurationError(
            f"event plan needs {total:.0f}s but the night lasts {cfg.duration_s:.0f}s"
        )
    slack = cfg.duration_s - total
    weights = rng.dirichlet(np.ones(len(blocks) + 1)) if blocks else np.array([1.0])
    gaps = _MIN_GAP_S + slack * weights

    events: list[EventAnnotation] = []
    t = float(gaps[0])
    for pos, bi in enumerate(order):
        b = blocks[bi]
        if b["type"] == "resp":
            start, end = t, t + b["dur"]
            events.append(EventAnnotation(b["kind"], start, end))
            if b["desat"]:
                events.append(EventAnnotation("Desaturation", start + 0.4 * b["dur"], end))
            if "ra_dur" in b:
                ra_start = end + b["ra_delay"]
                events.append(EventAnnotation("RA", ra_start, ra_start + b["ra_dur"]))
        elif b["type"] == "SA":
            start = t + SA_CLEAN_PREFIX_S
            events.append(EventAnnotation("SA", start, start + b["dur"]))
        else:
            events.append(EventAnnotation(b["type"], t, t + b["dur"]))
        t += block_len(b) + float(gaps[pos + 1])

    events.sort(key=lambda e: (e.start_s, e.kind))
    validate_plan(events, cfg.duration_s)
    return events


def _smooth_background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    block = 16
    ch = height // block + 2
    cw = width // block + 2
    coarse = rng.uniform(60.0, 190.0, size=(ch, cw))
    up = np.kron(coarse, np.ones((block, block)))[:height, :width]
    return up.astype(np.float32)


def _breath_profile(rect: Rect) -> np.ndarray:
    ys = 0.5 * (1.0 - np.cos(2.0 * np.pi * (np.arange(rect.h) + 0.5) / rect.h))
    xs = 0.5 * (1.0 - np.cos(2.0 * np.pi * (np.arange(rect.w) + 0.5) / rect.w))
    return np.outer(ys, xs).astype(np.float32)


def render_frames(cfg: SynthConfig, events: Sequence[EventAnnotation]) -> Iterator[Frame]:
    """Deterministic frame stream for a planned night."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    h, w = cfg.height, cfg.width
    layout = default_layout(w, h)
    chest = cfg.breathing.rect or layout["chest"]
    mosaic = cfg.mosaic or layout["mosaic"]
    torso, limb_l, limb_r, body = (
        layout["torso"],
        layout["limb_l"],
        layout["limb_r"],
        layout["body"],
    )

    bg = _smooth_background(rng, h, w)
    mos_h, mos_w = mosaic.h, mosaic.w
    block = 8
    levels = rng.integers(0, 6, size=(mos_h // block + 1, mos_w // block + 1)) * 51
    mosaic_pattern = np.kron(levels, np.ones((block, block), dtype=np.int64))[:mos_h, :mos_w]
    mosaic_pattern = mosaic_pattern.astype(np.uint8)
    profile = _breath_profile(chest)

    events = sorted(events, key=lambda e: (e.start_s, e.kind))
    mags = cfg.magnitudes
    two_pi = 2.0 * math.pi

    def add_burst(img: np.ndarray, rect: Rect, mag: float) -> None:
        sy, sx = rect.slices
        img[sy, sx] += rng.uniform(-mag, mag, size=(rect.h, rect.w)).astype(np.float32)

    for i in range(cfg.n_frames):
        t = i / cfg.fps
        img = bg.copy()

        active = [e for e in events if e.start_s <= t < e.end_s]
        factor = 1.0
        if any(e.kind == "Apnea" for e in active):
            factor = 0.0
        elif any(e.kind == "Hypopnea" for e in active):
            factor = 0.5
        if cfg.breathing.amplitude > 0:
            sy, sx = chest.slices
            phase = math.sin(two_pi * t / cfg.breathing.period_s)
            img[sy, sx] += profile * np.float32(cfg.breathing.amplitude * factor * phase)

        for e in active:
            if e.kind == "RA" or e.kind == "SA":
                mag = mags.ra_burst if e.kind == "RA" else mags.sa_burst
                add_burst(img, torso, mag)
                add_burst(img, limb_l, mag)
                add_burst(img, limb_r, mag)
            elif e.kind == "Wake":
                add_burst(img, body, mags.wake_sustained)
            elif e.kind == "PLMA":
                if (t - e.start_s) % cfg.plma_period_s < cfg.plma_period_s * cfg.plma_duty:
                    add_burst(img, limb_l, mags.plma_burst)
                    add_burst(img, limb_r, mags.plma_burst)

        if cfg.noise_sigma > 0:
            img += rng.standard_normal(size=(h, w), dtype=np.float32) * np.float32(cfg.noise_sigma)

        out = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        msy, msx = mosaic.slices
        out[msy, msx] = mosaic_pattern
        yield Frame(pixels=out, t=t)


def make_night(cfg: SynthConfig) -> tuple[NightRecord, GroundTruth]:
    """An in-memory night: frames render lazily and identically on each read."""
    events = plan_events(cfg)
    true_ahi = ground_truth_ahi(events, cfg.tib_h)
    gt = GroundTruth(
        annotations=list(events), true_ahi=true_ahi, osa_true=true_ahi >= OSA_TRUE_THRESHOLD
    )
    meta = NightMeta(
        fps=cfg.fps,
        width=cfg.width,
        height=cfg.height,
        tib_s=cfg.tib_s,
        patient_id=cfg.patient_id or f"synth-{cfg.seed:08d}",
    )
    record = NightRecord(
        meta=meta,
        n_frames=cfg.n_frames,
        frames_factory=lambda: render_frames(cfg, events),
        annotations=list(events),
    )
    return record, gt


def generate_night(cfg: SynthConfig, out_dir: str | Path) -> tuple[NightRecord, GroundTruth]:
    """Render a night to the on-disk layout; returns the re-opened record."""
    record, gt = make_night(cfg)
    out = Path(out_dir)
    write_night(out, record.meta, record.frames(), annotations=gt.annotations)
    payload = {
        "true_ahi": gt.true_ahi,
        "osa_true": gt.osa_true,
        "counts": gt.counts(),
        "seed": cfg.seed,
    }
    (out / "ground_truth.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return open_night(out), gt


@dataclass
class CohortEntry:
    night: NightRecord
    ground_truth: GroundTruth
    seed: int
    ahi_target: float
    patient_id: str
    path: Path | None = None


@dataclass
class CohortManifest:
    entries: list[CohortEntry]
    seed: int

    def true_ahis(self) -> list[float]:
        return [e.ground_truth.true_ahi for e in self.entries]


def _resolve_severities(severities, n: int, rng: np.random.Generator) -> list[float]:
    if isinstance(severities, tuple) and len(severities) == 3:
        mode, lo, hi = severities
        if mode == "uniform":
            return [float(v) for v in rng.uniform(lo, hi, size=n)]
        if mode == "linspace":
            return [float(v) for v in np.linspace(lo, hi, n)]
        raise ValidationError(f"unknown severity mode {mode!r}")
    values = [float(v) for v in severities]
    if len(values) != n:
        raise ValidationError(f"{len(values)} severities given for {n} nights")
    return values


def generate_cohort(
    n_nights: int,
    severities,
    seed: int,
    out_dir: str | Path | None = None,
    duration_s: float = 1200.0,
    fps: float = 5.0,
    width: int = 320,
    height: int = 240,
    ra_fraction: float = 0.75,
    ra_jitter_sd: float = 0.6,
    rates: EventRates | None = None,
    noise_sigma: float = 2.0,
) -> CohortManifest:
    """Nights whose arousal counts track apnea/hypopnea counts linearly.

    ``severities`` is a per-night AHI target list, ("uniform", lo, hi), or
    ("linspace", lo, hi). With ``out_dir`` the nights are written to disk and
    a manifest.json is emitted; otherwise records stay lazy and in memory.
    """
    if n_nights < 1:
        raise ValidationError(f"n_nights must be >= 1, got {n_nights}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    base_rates = rates or EventRates()
    tib_h = duration_s / 3600.0
    targets = _resolve_severities(severities, n_nights, rng)

    entries: list[CohortEntry] = []
    for i, ahi_target in enumerate(targets):
        night_seed = int(rng.integers(0, 2**31 - 1))
        n_resp = int(round(ahi_target * tib_h))
        n_apnea = int(round(0.7 * n_resp))
        n_hyp = n_resp - n_apnea
        n_ra = int(round(ra_fraction * n_resp + rng.normal(0.0, ra_jitter_sd)))
        n_ra = min(max(n_ra, 0), n_resp)
        counts = EventCounts(
            apnea=n_apnea,
            hypopnea=n_hyp,
            ra=n_ra,
            sa=int(round(base_rates.sa_per_h * tib_h)),
            plma=int(round(base_rates.plma_per_h * tib_h)),
            wake=int(round(base_rates.wake_per_h * tib_h)),
        )
        cfg = SynthConfig(
            duration_s=duration_s,
            fps=fps,
            width=width,
            height=height,
            seed=night_seed,
            counts=counts,
            rates=base_rates,
            noise_sigma=noise_sigma,
            patient_id=f"p{i:03d}",
        )
        if out_dir is not None:
            night_dir = Path(out_dir) / f"night_{i:03d}"
            record, gt = generate_night(cfg, night_dir)
            entries.append(
                CohortEntry(record, gt, night_seed, ahi_target, cfg.patient_id, night_dir)
            )
        else:
            record, gt = make_night(cfg)
            entries.append(CohortEntry(record, gt, night_seed, ahi_target, cfg.patient_id, None))

    manifest = CohortManifest(entries=entries, seed=seed)
    if out_dir is not None:
        payload = [
            {
                "dir": e.path.name,
                "seed": e.seed,
                "patient_id": e.patient_id,
                "ahi_target": e.ahi_target,
                "true_ahi": e.ground_truth.true_ahi,
                "osa_true": e.ground_truth.osa_true,
                "counts": e.ground_truth.counts(),
            }
            for e in entries
        ]
        (Path(out_dir) / "manifest.json").write_text(
            json.dumps({"seed": seed, "nights": payload}, indent=2, sort_keys=True) + "\n"
        )
    return manifest


def config_from_json(path: str | Path) -> SynthConfig:
    """Build a generator config from a JSON file of (possibly nested) settings."""
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: {e}") from None
    if not isinstance(d, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    kwargs = dict(d)
    try:
        if "breathing" in kwargs:
            b = dict(kwargs["breathing"])
            if b.get("rect") is not None:
                b["rect"] = Rect(**b["rect"])
            kwargs["breathing"] = BreathingSpec(**b)
        if "rates" in kwargs:
            kwargs["rates"] = EventRates(**kwargs["rates"])
        if "magnitudes" in kwargs:
            kwargs["magnitudes"] = MotionMagnitudes(**kwargs["magnitudes"])
        if kwargs.get("counts") is not None:
            kwargs["counts"] = EventCounts(**kwargs["counts"])
        if kwargs.get("mosaic") is not None:
            kwargs["mosaic"] = Rect(**kwargs["mosaic"])
        if kwargs.get("events") is not None:
            kwargs["events"] = tuple(EventAnnotation(**e) for e in kwargs["events"])
        return SynthConfig(**kwargs)
    except TypeError as e:
        raise FormatError(f"{path}: bad generator config: {e}") from None


def load_cohort(path: str | Path) -> CohortManifest:
    root = Path(path)
    manifest_path = root / "manifest.json"
    try:
        raw = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{manifest_path}: {e}") from None
    entries = []
    for item in raw.get("nights", []):
        night = open_night(root / item["dir"])
        gt = GroundTruth(
            annotations=night.annotations or [],
            true_ahi=float(item["true_ahi"]),
            osa_true=bool(item["osa_true"]),
        )
        entries.append(
            CohortEntry(
                night=night,
                ground_truth=gt,
                seed=int(item["seed"]),
                ahi_target=float(item["ahi_target"]),
                patient_id=str(item["patient_id"]),
                path=root / item["dir"],
            )
        )
    return CohortManifest(entries=entries, seed=int(raw.get("seed", 0)))
