"""Sleep-video apnea screening: frame differencing, sliding-window arousal
detection with a compact spatiotemporal classifier, and robust AHI estimation,
verified against a built-in synthetic night generator.
"""

from . import detector, diffing, errors, estimator, runtime, synth, video_io, windowing
from .detector import (
    BlockSpec,
    DetectorConfig,
    DetectorModel,
    TrainConfig,
    auc,
    default_config,
    forward,
    forward_batch,
    init_model,
    kfold_split,
    train,
)
from .diffing import DifferenceImage, LdpThreshold, count_ldp, difference_image, event_ldp_stats
from .estimator import (
    AhiModel,
    NightReport,
    RaEvent,
    WindowScore,
    aggregate_nights,
    classification_metrics,
    classify_osa,
    fit_huber,
    merge_windows_to_events,
    predict_ahi,
    ra_ratio,
    spearman,
)
from .runtime import BenchReport, PipelineConfig, analyze_night, benchmark
from .synth import GroundTruth, SynthConfig, generate_cohort, generate_night, make_night
from .video_io import (
    EventAnnotation,
    Frame,
    NightMeta,
    NightRecord,
    load_annotations,
    open_night,
)
from .windowing import (
    Clip,
    WindowPlan,
    build_windows,
    curate_training_clips,
    downsample_stream,
    spatial_downscale,
    window_starts,
)

__version__ = "0.1.0"
