"""From per-window probabilities to counted arousal events, an estimated AHI,
and the final apnea screening decision, plus the evaluation metrics used to
judge those estimates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConvergenceError,
    FormatError,
    MetricUndefinedError,
    RankError,
    ValidationError,
)

OSA_AHI_THRESHOLD = 15.0
DEFAULT_HUBER_DELTA = 1.35
DEFAULT_THETA = 0.5


@dataclass(frozen=True)
class WindowScore:
    start_s: float
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError(f"window probability must lie in [0, 1], got {self.p}")


@dataclass(frozen=True)
class RaEvent:
    start_s: float
    end_s: float
    peak_p: float

    def __post_init__(self):
        if not self.start_s < self.end_s:
            raise ValidationError(f"event needs start < end, got [{self.start_s}, {self.end_s}]")


@dataclass
class AhiModel:
    """Fitted linear map from arousal-event ratio (events/hour) to AHI."""

    slope: float
    intercept: float
    delta: float = DEFAULT_HUBER_DELTA
    osa_threshold: float = OSA_AHI_THRESHOLD

    def __post_init__(self):
        if self.delta <= 0:
            raise ValidationError(f"delta must be positive, got {self.delta}")

    def save(self, path: str | Path) -> None:
        payload = {
            "slope": self.slope,
            "intercept": self.intercept,
            "delta": self.delta,
            "osa_threshold": self.osa_threshold,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "AhiModel":
        try:
            d = json.loads(Path(path).read_text())
            return cls(
                slope=float(d["slope"]),
                intercept=float(d["intercept"]),
                delta=float(d["delta"]),
                osa_threshold=float(d["osa_threshold"]),
            )
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: bad AHI model file: {e}") from None


@dataclass
class NightReport:
    tib_h: float
    ra_events: list[RaEvent]
    ra_ratio: float
    ahi_estimate: float
    osa_positive: bool

    def to_dict(self) -> dict:
        return {
            "tib_h": self.tib_h,
            "ra_events": [
                {"start_s": e.start_s, "end_s": e.end_s, "peak_p": e.peak_p}
                for e in self.ra_events
            ],
            "ra_ratio": self.ra_ratio,
            "ahi_estimate": self.ahi_estimate,
            "osa_positive": self.osa_positive,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "NightReport":
        try:
            d = json.loads(text)
            return cls(
                tib_h=float(d["tib_h"]),
                ra_events=[
                    RaEvent(float(e["start_s"]), float(e["end_s"]), float(e["peak_p"]))
                    for e in d["ra_events"]
                ],
                ra_ratio=float(d["ra_ratio"]),
                ahi_estimate=float(d["ahi_estimate"]),
                osa_positive=bool(d["osa_positive"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad night report: {e}") from None


def merge_windows_to_events(
    scores: Sequence[WindowScore], theta: float, window_s: float
) -> list[RaEvent]:
    """Merge time-overlapping positive windows into disjoint arousal events.

    A window is positive when p >= theta; its interval is
    [start_s, start_s + window_s). Overlapping positive intervals form one
    event spanning their union, with peak_p the maximum probability.
    """
    if window_s <= 0:
        raise ValidationError(f"window_s must be positive, got {window_s}")
    starts = [s.start_s for s in scores]
    if any(b <= a for a, b in zip(starts, starts[1:])):
        raise ValidationError("window scores must be strictly ordered by start_s")
    if len(starts) >= 3:
        gaps = np.diff(starts)
        if not np.allclose(gaps, gaps[0], rtol=1e-9, atol=1e-9):
            raise ValidationError("window scores must be equally spaced")

    events: list[RaEvent] = []
    cur_start = cur_end = peak = None
    for s in scores:
        if s.p < theta:
            continue
        if cur_start is not None and s.start_s < cur_end:
            cur_end = max(cur_end, s.start_s + window_s)
            peak = max(peak, s.p)
        else:
            if cur_start is not None:
                events.append(RaEvent(cur_start, cur_end, peak))
            cur_start = s.start_s
            cur_end = s.start_s + window_s
            peak = s.p
    if cur_start is not None:
        events.append(RaEvent(cur_start, cur_end, peak))
    return events


def ra_ratio(events: Sequence[RaEvent], tib_h: float) -> float:
    """Arousal events per hour in bed."""
    if tib_h <= 0:
        raise ValidationError(f"tib_h must be positive, got {tib_h}")
    return len(events) / tib_h


def fit_huber(
    xs: Sequence[float],
    ys: Sequence[float],
    delta: float = DEFAULT_HUBER_DELTA,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> AhiModel:
    """Robust line fit minimizing the Huber loss of raw residuals via IRLS.

    The loss is quadratic for |residual| <= delta and linear beyond, so
    isolated outliers pull the fit far less than under least squares.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValidationError(f"xs and ys must be equal-length vectors, got {x.shape}, {y.shape}")
    if len(x) < 3:
        raise ValidationError(f"need at least 3 points, got {len(x)}")
    if delta <= 0:
        raise ValidationError(f"delta must be positive, got {delta}")
    if np.ptp(x) == 0:
        raise RankError("all x values are equal; slope is unidentifiable")

    design = np.column_stack([x, np.ones_like(x)])
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    for _ in range(max_iter):
        r = y - design @ beta
        absr = np.abs(r)
        w = np.where(absr <= delta, 1.0, delta / np.maximum(absr, 1e-300))
        sw = np.sqrt(w)
        new_beta, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
        change = np.max(np.abs(new_beta - beta))
        beta = new_beta
        if change <= tol * max(1.0, float(np.max(np.abs(beta)))):
            return AhiModel(slope=float(beta[0]), intercept=float(beta[1]), delta=delta)
    raise ConvergenceError(
        f"IRLS did not reach tolerance {tol} within {max_iter} iterations",
        last_iterate=(float(beta[0]), float(beta[1])),
        iterations=max_iter,
    )


def huber_objective(
    xs: Sequence[float], ys: Sequence[float], slope: float, intercept: float, delta: float
) -> float:
    r = np.asarray(ys, dtype=np.float64) - (slope * np.asarray(xs, dtype=np.float64) + intercept)
    absr = np.abs(r)
    quad = 0.5 * r**2
    lin = delta * (absr - 0.5 * delta)
    return float(np.sum(np.where(absr <= delta, quad, lin)))


def predict_ahi(model: AhiModel, ratio: float) -> float:
    """Estimated AHI, clamped at zero."""
    return max(0.0, model.slope * ratio + model.intercept)


def classify_osa(model: AhiModel, ahi: float) -> bool:
    return ahi >= model.osa_threshold


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation: Pearson correlation of average-ranked data."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValidationError(f"xs and ys must be equal-length vectors, got {x.shape}, {y.shape}")
    if len(x) < 2:
        raise ValidationError(f"need at least 2 points, got {len(x)}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise MetricUndefinedError("rank correlation is undefined for constant input")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.sum(rx * ry) / math.sqrt(np.sum(rx**2) * np.sum(ry**2)))


def classification_metrics(
    predictions: Sequence[bool], truths: Sequence[bool]
) -> dict[str, float | None]:
    """Accuracy, precision, recall, and F1 from binary decisions.

    Zero-denominator precision or recall is reported as None and leaves F1
    undefined (None) as well.
    """
    if len(predictions) != len(truths):
        raise ValidationError(
            f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths"
        )
    if not predictions:
        raise ValidationError("metrics over an empty set are undefined")
    pred = [bool(p) for p in predictions]
    true = [bool(t) for t in truths]
    tp = sum(p and t for p, t in zip(pred, true))
    fp = sum(p and not t for p, t in zip(pred, true))
    fn = sum(t and not p for p, t in zip(pred, true))
    tn = len(pred) - tp - fp - fn

    accuracy = (tp + tn) / len(pred)
    precision = tp / (tp + fp) if (tp + fp) > 0 else None
    recall = tp / (tp + fn) if (tp + fn) > 0 else None
    if precision is None or recall is None or (precision + recall) == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1}


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        raise MetricUndefinedError("F1 undefined when precision + recall is 0")
    return 2 * precision * recall / (precision + recall)


@dataclass
class MultiNightSummary:
    mean_ahi: float
    osa_positive: bool
    n_nights: int


def aggregate_nights(reports: Sequence[NightReport]) -> MultiNightSummary:
    """Mean AHI over nights; the screening decision applies to that mean."""
    if not reports:
        raise ValidationError("cannot aggregate zero nights")
    mean_ahi = float(np.mean([r.ahi_estimate for r in reports]))
    threshold = OSA_AHI_THRESHOLD
    return MultiNightSummary(
        mean_ahi=mean_ahi, osa_positive=mean_ahi >= threshold, n_nights=len(reports)
    )


def calibrate_theta(ps: Sequence[float], labels: Sequence[bool]) -> float:
    """Window-level threshold maximizing F1 on a labeled validation set.

    Candidates are the observed probabilities; ties favor the smallest
    threshold so recall is preserved.
    """
    if len(ps) != len(labels) or not ps:
        raise ValidationError("need equal-length, non-empty scores and labels")
    truths = [bool(b) for b in labels]
    if not any(truths) or all(truths):
        raise MetricUndefinedError("theta calibration needs both classes")
    best_theta = DEFAULT_THETA
    best_f1 = -1.0
    for theta in sorted(set(float(p) for p in ps)):
        m = classification_metrics([p >= theta for p in ps], truths)
        f1 = m["f1"] if m["f1"] is not None else -1.0
        if f1 > best_f1:
            best_f1 = f1
            best_theta = theta
    return best_theta


def write_scores_csv(scores: Sequence[WindowScore], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["start_s", "p"])
        for s in scores:
            writer.writerow([repr(s.start_s), repr(s.p)])


def read_scores_csv(path: str | Path) -> list[WindowScore]:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["start_s", "p"]:
            raise FormatError(f"{path}: expected header start_s,p")
        for row in reader:
            if len(row) != 2:
                raise FormatError(f"{path}: bad row {row!r}")
            try:
                out.append(WindowScore(start_s=float(row[0]), p=float(row[1])))
            except ValueError as e:
                raise FormatError(f"{path}: bad row {row!r}: {e}") from None
    return out
