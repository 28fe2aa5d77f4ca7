"""End-to-end night analysis and the on-device-style benchmark harness.

``analyze_night`` streams clips from a frame source through the detector,
merges positive windows into arousal events, and emits a night report. The
streaming mode runs ingest+preprocessing and inference in two stages over a
bounded clip queue; batch mode materializes all clips first. Both produce
byte-identical reports.
"""

from __future__ import annotations

import json
import os
import queue
import resource
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .detector import DetectorModel, forward_batch
from .errors import ConfigurationError, ShapeError, ValidationError
from .estimator import (
    AhiModel,
    NightReport,
    RaEvent,
    WindowScore,
    classify_osa,
    merge_windows_to_events,
    predict_ahi,
    ra_ratio,
    write_scores_csv,
)
from .video_io import Frame, NightRecord, open_night
from .windowing import Clip, WindowPlan, build_windows

# Published figures for the embedded (Jetson Nano) reference run, used only
# for side-by-side reporting, never as a gate.
REFERENCE_EMBEDDED_TOTAL_S = 3.264
REFERENCE_EMBEDDED_8H_MIN = 50.0

EIGHT_HOUR_CLIPS = 959  # floor((28800 - 60) / 30) + 1


@dataclass(frozen=True)
class PipelineConfig:
    model_path: str | Path
    ahi_model_path: str | Path
    plan: WindowPlan = field(default_factory=WindowPlan)
    theta: float = 0.5
    realtime: bool = False
    max_buffer_frames: int = 1200

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigurationError(f"theta must lie in [0, 1], got {self.theta}")
        if self.max_buffer_frames < 1:
            raise ConfigurationError(
                f"max_buffer_frames must be >= 1, got {self.max_buffer_frames}"
            )


@dataclass
class AnalyzeResult:
    report: NightReport
    scores: list[WindowScore]
    deadline_misses: int = 0
    mean_clip_process_s: float = 0.0

    def report_json(self, realtime: bool = False) -> str:
        payload = self.report.to_dict()
        if realtime:
            payload["deadline_misses"] = self.deadline_misses
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _stage_threads() -> int:
    raw = os.environ.get("SLACTION_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 2
    except ValueError:
        return 2


def _paced_frames(night: NightRecord, wall_start: float) -> Iterator[Frame]:
    for frame in night.frames():
        delay = wall_start + frame.t - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        yield frame


def _validate_shapes(model: DetectorModel, plan: WindowPlan) -> None:
    want = (model.config.input_t, model.config.input_h, model.config.input_w)
    have = (plan.diffs_per_clip, plan.clip_h, plan.clip_w)
    if want != have:
        raise ConfigurationError(
            f"model expects clips of {want} (T, H, W) but the plan produces {have}"
        )


def analyze_night(
    night: str | Path | NightRecord,
    cfg: PipelineConfig,
    mode: str = "streaming",
    out_report: str | Path | None = None,
    out_scores: str | Path | None = None,
) -> AnalyzeResult:
    """Score every window of a night and derive its report.

    ``streaming`` keeps a bounded number of clips in flight between a
    producer (ingest + preprocessing) and a consumer (inference); ``batch``
    materializes all clips before scoring. Reports are identical either way.
    In realtime mode ingestion is paced at source fps and a clip missing its
    step deadline increments a warning counter instead of failing.
    """
    if mode not in ("streaming", "batch"):
        raise ConfigurationError(f"mode must be 'streaming' or 'batch', got {mode!r}")
    record = open_night(night) if not isinstance(night, NightRecord) else night
    model = DetectorModel.load(cfg.model_path)
    ahi_model = AhiModel.load(cfg.ahi_model_path)
    try:
        _validate_shapes(model, cfg.plan)
    except ShapeError as e:  # pragma: no cover - defensive
        raise ConfigurationError(str(e)) from None

    frames_per_window = int(round(cfg.plan.window_s * record.meta.fps))
    if cfg.max_buffer_frames < frames_per_window:
        raise ConfigurationError(
            f"max_buffer_frames={cfg.max_buffer_frames} is below one window "
            f"({frames_per_window} frames at {record.meta.fps} fps)"
        )

    wall_start = time.monotonic()
    source = record
    if cfg.realtime:
        source = NightRecord(
            meta=record.meta,
            n_frames=record.n_frames,
            frames_factory=lambda: _paced_frames(record, wall_start),
            annotations=record.annotations,
            path=record.path,
        )

    def score_clip(clip: Clip) -> float:
        return float(forward_batch(model, clip.diffs[None])[0])

    scores: list[WindowScore] = []
    misses = 0
    clip_times: list[float] = []

    if mode == "batch":
        clips = list(build_windows(source, cfg.plan))
        for clip in clips:
            t0 = time.monotonic()
            p = score_clip(clip)
            clip_times.append(time.monotonic() - t0)
            scores.append(WindowScore(start_s=clip.start_s, p=p))
    elif _stage_threads() < 2:
        for clip in build_windows(source, cfg.plan):
            t0 = time.monotonic()
            p = score_clip(clip)
            done = time.monotonic()
            clip_times.append(done - t0)
            if cfg.realtime and done > wall_start + clip.start_s + cfg.plan.window_s + cfg.plan.step_s:
                misses += 1
            scores.append(WindowScore(start_s=clip.start_s, p=p))
    else:
        capacity = max(1, cfg.max_buffer_frames // frames_per_window)
        clip_queue: queue.Queue = queue.Queue(maxsize=capacity)
        producer_error: list[BaseException] = []

        def produce() -> None:
            try:
                for clip in build_windows(source, cfg.plan):
                    clip_queue.put(clip)
            except BaseException as e:  # propagated to the consumer
                producer_error.append(e)
            finally:
                clip_queue.put(None)

        worker = threading.Thread(target=produce, name="slaction-ingest", daemon=True)
        worker.start()
        while True:
            clip = clip_queue.get()
            if clip is None:
                break
            t0 = time.monotonic()
            p = score_clip(clip)
            done = time.monotonic()
            clip_times.append(done - t0)
            if cfg.realtime and done > wall_start + clip.start_s + cfg.plan.window_s + cfg.plan.step_s:
                misses += 1
            scores.append(WindowScore(start_s=clip.start_s, p=p))
        worker.join()
        if producer_error:
            raise producer_error[0]

    events = merge_windows_to_events(scores, cfg.theta, cfg.plan.window_s)
    tib_h = record.meta.tib_s / 3600.0
    ratio = ra_ratio(events, tib_h)
    ahi = predict_ahi(ahi_model, ratio)
    report = NightReport(
        tib_h=tib_h,
        ra_events=events,
        ra_ratio=ratio,
        ahi_estimate=ahi,
        osa_positive=classify_osa(ahi_model, ahi),
    )
    result = AnalyzeResult(
        report=report,
        scores=scores,
        deadline_misses=misses,
        mean_clip_process_s=float(np.mean(clip_times)) if clip_times else 0.0,
    )
    if out_report is not None:
        Path(out_report).write_text(result.report_json(realtime=cfg.realtime))
    if out_scores is not None:
        write_scores_csv(scores, out_scores)
    return result


@dataclass
class BenchReport:
    model_load_s: float
    preprocess_mean_s: float
    preprocess_sd_s: float
    inference_mean_s: float
    inference_sd_s: float
    total_mean_s: float
    total_sd_s: float
    peak_rss_bytes: int
    n_clips: int
    deadline_s: float
    realtime_ok: bool
    projected_8h_s: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _random_source_frames(
    rng: np.random.Generator, n: int, height: int, width: int, fps: float
) -> list[Frame]:
    return [
        Frame(pixels=rng.integers(0, 256, size=(height, width), dtype=np.uint8), t=i / fps)
        for i in range(n)
    ]


def benchmark(
    model_path: str | Path,
    plan: WindowPlan,
    n_clips: int,
    seed: int,
    source_fps: float = 5.0,
    source_scale: int = 2,
) -> BenchReport:
    """Time model load, per-clip preprocessing, and per-clip inference.

    Inputs are seeded synthetic clips built from random source frames at
    ``source_scale`` times the clip resolution, so the preprocessing stage
    (temporal downsampling, spatial downscaling, differencing) does real work.
    """
    if n_clips < 5:
        raise ValidationError(f"need at least 5 clips for stable statistics, got {n_clips}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))

    t0 = time.monotonic()
    model = DetectorModel.load(model_path)
    model_load_s = time.monotonic() - t0
    _validate_shapes(model, plan)

    src_h = plan.clip_h * source_scale
    src_w = plan.clip_w * source_scale
    frames_per_window = int(round(plan.window_s * source_fps))

    from .video_io import NightMeta  # local import to keep module top tidy

    pre_times, inf_times, tot_times = [], [], []
    for _ in range(n_clips):
        frames = _random_source_frames(rng, frames_per_window, src_h, src_w, source_fps)
        meta = NightMeta(
            fps=source_fps, width=src_w, height=src_h, tib_s=plan.window_s, patient_id="bench"
        )
        record = NightRecord(
            meta=meta, n_frames=len(frames), frames_factory=lambda f=frames: iter(f)
        )
        t_start = time.monotonic()
        clip = next(iter(build_windows(record, plan)))
        t_pre = time.monotonic()
        forward_batch(model, clip.diffs[None])
        t_end = time.monotonic()
        pre_times.append(t_pre - t_start)
        inf_times.append(t_end - t_pre)
        tot_times.append(t_end - t_start)

    def mean_sd(xs: Sequence[float]) -> tuple[float, float]:
        return float(np.mean(xs)), float(np.std(xs, ddof=1))

    pre_m, pre_s = mean_sd(pre_times)
    inf_m, inf_s = mean_sd(inf_times)
    tot_m, tot_s = mean_sd(tot_times)
    peak_rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    return BenchReport(
        model_load_s=model_load_s,
        preprocess_mean_s=pre_m,
        preprocess_sd_s=pre_s,
        inference_mean_s=inf_m,
        inference_sd_s=inf_s,
        total_mean_s=tot_m,
        total_sd_s=tot_s,
        peak_rss_bytes=int(peak_rss),
        n_clips=n_clips,
        deadline_s=plan.step_s,
        realtime_ok=tot_m <= plan.step_s,
        projected_8h_s=tot_m * EIGHT_HOUR_CLIPS,
    )
