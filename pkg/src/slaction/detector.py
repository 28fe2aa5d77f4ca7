"""Compact factorized spatiotemporal convolutional classifier for clips.

Each block applies a 2-D spatial convolution, then a 1-D temporal convolution,
then a ReLU and a fixed 2x2 spatial average pool (skipped once the spatial
dims drop below 2). A global spatiotemporal average pool feeds a small
two-layer head producing one logit. Weights live in a flat float32 array with
a named segment per layer, so models round-trip exactly through the on-disk
format (one JSON header line + raw little-endian float32 blob).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    ConfigurationError,
    DivergenceError,
    FormatError,
    MetricUndefinedError,
    ShapeError,
    TrainingError,
    ValidationError,
)
from .windowing import Clip

FORMAT_VERSION = 1

# Logits are clamped before the sigmoid so probabilities stay strictly
# inside (0, 1) even for very confident models.
_LOGIT_CLAMP = 33.0


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    spatial_kernel: int = 3
    temporal_kernel: int = 3
    spatial_stride: int = 1
    temporal_stride: int = 1

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigurationError(f"channels must be >= 1, got {self.channels}")
        for name in ("spatial_kernel", "temporal_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"{name} must be odd and >= 1, got {k}")
        for name in ("spatial_stride", "temporal_stride"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")


DEFAULT_BLOCKS = (
    BlockSpec(channels=8, spatial_stride=2, temporal_stride=2),
    BlockSpec(channels=16, temporal_stride=2),
    BlockSpec(channels=32, temporal_stride=2),
    BlockSpec(channels=64),
)


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture plus expected input geometry and a 16-bit storage budget."""

    blocks: tuple[BlockSpec, ...] = DEFAULT_BLOCKS
    head_hidden: int = 64
    input_t: int = 149
    input_h: int = 120
    input_w: int = 160
    param_budget_bytes: int = 6_000_000

    def __post_init__(self):
        if not self.blocks:
            raise ConfigurationError("config needs at least one block")
        if self.head_hidden < 1:
            raise ConfigurationError(f"head_hidden must be >= 1, got {self.head_hidden}")
        if min(self.input_t, self.input_h, self.input_w) < 1:
            raise ConfigurationError(
                f"input dims must be >= 1, got {self.input_t}x{self.input_h}x{self.input_w}"
            )
        n = self.parameter_count()
        if 2 * n > self.param_budget_bytes:
            raise ConfigurationError(
                f"parameter count {n} needs {2 * n} bytes at 16-bit storage, "
                f"over the {self.param_budget_bytes}-byte budget"
            )

    def parameter_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.segments())

    def segments(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) table of every weight segment."""
        segs: list[tuple[str, tuple[int, ...]]] = []
        c_in = 1
        for i, b in enumerate(self.blocks):
            k, kt = b.spatial_kernel, b.temporal_kernel
            segs.append((f"block{i}.spatial.weight", (b.channels, c_in, 1, k, k)))
            segs.append((f"block{i}.spatial.bias", (b.channels,)))
            segs.append((f"block{i}.temporal.weight", (b.channels, b.channels, kt, 1, 1)))
            segs.append((f"block{i}.temporal.bias", (b.channels,)))
            c_in = b.channels
        segs.append(("head.fc1.weight", (self.head_hidden, c_in)))
        segs.append(("head.fc1.bias", (self.head_hidden,)))
        segs.append(("head.fc2.weight", (1, self.head_hidden)))
        segs.append(("head.fc2.bias", (1,)))
        return segs

    def to_dict(self) -> dict:
        return {
            "blocks": [
                {
                    "channels": b.channels,
                    "spatial_kernel": b.spatial_kernel,
                    "temporal_kernel": b.temporal_kernel,
                    "spatial_stride": b.spatial_stride,
                    "temporal_stride": b.temporal_stride,
                }
                for b in self.blocks
            ],
            "head_hidden": self.head_hidden,
            "input_t": self.input_t,
            "input_h": self.input_h,
            "input_w": self.input_w,
            "param_budget_bytes": self.param_budget_bytes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        try:
            blocks = tuple(BlockSpec(**b) for b in d["blocks"])
            return cls(
                blocks=blocks,
                head_hidden=int(d["head_hidden"]),
                input_t=int(d["input_t"]),
                input_h=int(d["input_h"]),
                input_w=int(d["input_w"]),
                param_budget_bytes=int(d["param_budget_bytes"]),
            )
        except (KeyError, TypeError) as e:
            raise FormatError(f"bad detector config: {e}") from None


def default_config() -> DetectorConfig:
    return DetectorConfig()


class _Net(torch.nn.Module):
    def __init__(self, config: DetectorConfig, dtype=torch.float32):
        super().__init__()
        self.config = config
        c_in = 1
        spatial, temporal = [], []
        for b in config.blocks:
            k, kt = b.spatial_kernel, b.temporal_kernel
            spatial.append(
                torch.nn.Conv3d(
                    c_in, b.channels, (1, k, k),
                    stride=(1, b.spatial_stride, b.spatial_stride),
                    padding=(0, k // 2, k // 2), dtype=dtype,
                )
            )
            temporal.append(
                torch.nn.Conv3d(
                    b.channels, b.channels, (kt, 1, 1),
                    stride=(b.temporal_stride, 1, 1),
                    padding=(kt // 2, 0, 0), dtype=dtype,
                )
            )
            c_in = b.channels
        self.spatial = torch.nn.ModuleList(spatial)
        self.temporal = torch.nn.ModuleList(temporal)
        self.fc1 = torch.nn.Linear(c_in, config.head_hidden, dtype=dtype)
        self.fc2 = torch.nn.Linear(config.head_hidden, 1, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for sp, tp in zip(self.spatial, self.temporal):
            x = sp(x)
            x = tp(x)
            x = F.relu(x)
            if x.shape[-2] >= 2 and x.shape[-1] >= 2:
                x = F.avg_pool3d(x, (1, 2, 2))
        x = x.mean(dim=(2, 3, 4))
        x = F.relu(self.fc1(x))
        return self.fc2(x)

    def named_segments(self) -> list[tuple[str, torch.nn.Parameter]]:
        out = []
        for i, (sp, tp) in enumerate(zip(self.spatial, self.temporal)):
            out.append((f"block{i}.spatial.weight", sp.weight))
            out.append((f"block{i}.spatial.bias", sp.bias))
            out.append((f"block{i}.temporal.weight", tp.weight))
            out.append((f"block{i}.temporal.bias", tp.bias))
        out.append(("head.fc1.weight", self.fc1.weight))
        out.append(("head.fc1.bias", self.fc1.bias))
        out.append(("head.fc2.weight", self.fc2.weight))
        out.append(("head.fc2.bias", self.fc2.bias))
        return out


@dataclass(eq=False)
class DetectorModel:
    config: DetectorConfig
    weights: np.ndarray  # flat float32, concatenated in segment order
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32).reshape(-1)
        expected = self.config.parameter_count()
        if self.weights.size != expected:
            raise ValidationError(
                f"weight array has {self.weights.size} values, config implies {expected}"
            )
        self._net_cache: _Net | None = None

    def segment_view(self, name: str) -> np.ndarray:
        offset = 0
        for seg_name, shape in self.config.segments():
            size = int(np.prod(shape))
            if seg_name == name:
                return self.weights[offset : offset + size].reshape(shape)
            offset += size
        raise KeyError(name)

    def to_torch(self, dtype=torch.float32) -> _Net:
        """A fresh network carrying a copy of this model's weights."""
        net = _Net(self.config, dtype=dtype)
        with torch.no_grad():
            for name, param in net.named_segments():
                src = torch.from_numpy(self.segment_view(name).copy())
                param.copy_(src.to(dtype))
        return net

    def _net(self) -> _Net:
        if self._net_cache is None:
            self._net_cache = self.to_torch(torch.float32)
            self._net_cache.eval()
        return self._net_cache

    def save(self, path: str | Path) -> None:
        header = {
            "format": "slaction-detector",
            "version": self.version,
            "config": self.config.to_dict(),
            "segments": [
                {"name": name, "shape": list(shape)} for name, shape in self.config.segments()
            ],
            "n_weights": int(self.weights.size),
        }
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            f.write(np.ascontiguousarray(self.weights, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "DetectorModel":
        with open(path, "rb") as f:
            header_line = f.readline()
            blob = f.read()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise FormatError(f"{path}: missing or corrupt model header") from None
        if header.get("format") != "slaction-detector":
            raise FormatError(f"{path}: not a detector model file")
        if header.get("version") != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported model version {header.get('version')}")
        config = DetectorConfig.from_dict(header.get("config", {}))
        n = int(header.get("n_weights", -1))
        if n != config.parameter_count():
            raise FormatError(f"{path}: weight count {n} does not match config")
        if len(blob) != 4 * n:
            raise FormatError(f"{path}: weight blob has {len(blob)} bytes, expected {4 * n}")
        weights = np.frombuffer(blob, dtype="<f4").astype(np.float32)
        return cls(config=config, weights=weights, version=FORMAT_VERSION)


def init_model(config: DetectorConfig, seed: int) -> DetectorModel:
    """Seeded fan-in-scaled uniform weights, zero biases; bit-identical per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    parts = []
    for name, shape in config.segments():
        size = int(np.prod(shape))
        if name.endswith(".bias"):
            parts.append(np.zeros(size, dtype=np.float32))
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else size
        bound = 1.0 / math.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size).astype(np.float32))
    return DetectorModel(config=config, weights=np.concatenate(parts))


def _check_clip_dims(config: DetectorConfig, arr: np.ndarray) -> None:
    want = (config.input_t, config.input_h, config.input_w)
    if arr.shape[-3:] != want:
        raise ShapeError(f"clip dims {arr.shape[-3:]} do not match config input {want}")


def forward_batch(model: DetectorModel, diffs: np.ndarray) -> np.ndarray:
    """Probabilities for a (n, T, H, W) batch of clips."""
    diffs = np.asarray(diffs, dtype=np.float32)
    if diffs.ndim != 4:
        raise ShapeError(f"expected a (n, T, H, W) batch, got shape {diffs.shape}")
    _check_clip_dims(model.config, diffs)
    net = model._net()
    with torch.no_grad():
        logits = net(torch.from_numpy(diffs[:, None]))
    logits = logits.reshape(-1).double().clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP)
    return torch.sigmoid(logits).numpy()


def forward(model: DetectorModel, clip: Clip | np.ndarray) -> float:
    """Probability that one clip contains a respiratory arousal."""
    arr = clip.diffs if isinstance(clip, Clip) else np.asarray(clip, dtype=np.float32)
    if arr.ndim != 3:
        raise ShapeError(f"expected a (T, H, W) clip, got shape {arr.shape}")
    return float(forward_batch(model, arr[None])[0])


def score_clips(
    model: DetectorModel, clips: Sequence[Clip], batch_size: int = 8
) -> np.ndarray:
    probs = np.empty(len(clips), dtype=np.float64)
    for lo in range(0, len(clips), batch_size):
        batch = [clips[i] for i in range(lo, min(lo + batch_size, len(clips)))]
        x = np.stack([np.asarray(c.diffs, dtype=np.float32) for c in batch])
        probs[lo : lo + len(batch)] = forward_batch(model, x)
    return probs


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    pos_weight: float | None = None  # None: computed as n_neg / n_pos
    patience: int = 5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigurationError("epochs, batch_size, and patience must be >= 1")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.pos_weight is not None and self.pos_weight <= 0:
            raise ConfigurationError(f"pos_weight must be positive, got {self.pos_weight}")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] | None = None
    best_epoch: int | None = None
    stopped_early: bool = False
    steps: int = 0
    pos_weight: float = 1.0


def _labels_to_y(clips) -> np.ndarray:
    labels = clips.labels if hasattr(clips, "labels") else [c.label for c in clips]
    y = np.empty(len(labels), dtype=np.float32)
    for i, lab in enumerate(labels):
        if lab == "RA":
            y[i] = 1.0
        elif lab == "nonRA":
            y[i] = 0.0
        else:
            raise TrainingError(f"clip {i} is unlabeled")
    return y


def _batch_tensor(clips, idx: Iterable[int]) -> torch.Tensor:
    x = np.stack([np.asarray(clips[int(i)].diffs, dtype=np.float32) for i in idx])
    return torch.from_numpy(x[:, None])


def _dataset_loss(net: _Net, clips, y: np.ndarray, loss_fn, batch_size: int) -> float:
    total = 0.0
    with torch.no_grad():
        for lo in range(0, len(y), batch_size):
            idx = range(lo, min(lo + batch_size, len(y)))
            logits = net(_batch_tensor(clips, idx)).reshape(-1)
            yt = torch.from_numpy(y[lo : lo + len(idx)])
            total += float(loss_fn(logits, yt)) * len(idx)
    return total / len(y)


def _flatten_net(net: _Net) -> np.ndarray:
    parts = [p.detach().numpy().astype(np.float32).reshape(-1) for _, p in net.named_segments()]
    return np.concatenate(parts)


def train(
    model: DetectorModel,
    clips,
    tc: TrainConfig,
    val_clips=None,
) -> tuple[DetectorModel, TrainHistory]:
    """Minimize class-weighted binary cross-entropy with Adam over mini-batches.

    Shuffling is seeded, so a fixed (model, clips, config) triple reproduces
    the same weights. With a validation split, the best-validation checkpoint
    is returned and training stops after ``patience`` epochs without
    improvement.
    """
    if len(clips) == 0:
        raise TrainingError("no training clips")
    y = _labels_to_y(clips)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise TrainingError(f"training needs both classes, got {n_pos} RA / {n_neg} nonRA")
    y_val = _labels_to_y(val_clips) if val_clips is not None else None

    pos_weight = tc.pos_weight if tc.pos_weight is not None else n_neg / n_pos
    loss_fn = torch.nn.BCEWithLogitsLoss(pos_weight=torch.tensor([pos_weight], dtype=torch.float32))

    net = model.to_torch(torch.float32)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=tc.learning_rate, betas=(0.9, 0.999))
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed]))

    history = TrainHistory(val_loss=[] if val_clips is not None else None, pos_weight=pos_weight)
    best_val = math.inf
    best_state: np.ndarray | None = None
    epochs_since_best = 0
    step = 0

    for epoch in range(tc.epochs):
        perm = rng.permutation(len(y))
        running = 0.0
        for lo in range(0, len(perm), tc.batch_size):
            idx = perm[lo : lo + tc.batch_size]
            logits = net(_batch_tensor(clips, idx)).reshape(-1)
            loss = loss_fn(logits, torch.from_numpy(y[idx]))
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step}", step=step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss.detach()) * len(idx)
            step += 1
        history.train_loss.append(running / len(y))
        history.steps = step

        if val_clips is not None:
            net.eval()
            vl = _dataset_loss(net, val_clips, y_val, loss_fn, tc.batch_size)
            net.train()
            history.val_loss.append(vl)
            if vl < best_val:
                best_val = vl
                best_state = _flatten_net(net)
                history.best_epoch = epoch
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= tc.patience:
                    history.stopped_early = True
                    break

    weights = best_state if best_state is not None else _flatten_net(net)
    return DetectorModel(config=model.config, weights=weights), history


def kfold_split(patient_ids: Sequence[str], k: int, seed: int) -> list[list[str]]:
    """Seeded patient-level partition into k folds with sizes differing by <= 1."""
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        dupes = sorted({p for p in ids if ids.count(p) > 1})
        raise ValidationError(f"duplicate patient ids: {dupes[:5]}")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(ids) < k:
        raise ValidationError(f"cannot split {len(ids)} patients into {k} folds")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    base, extra = divmod(len(ids), k)
    folds = []
    pos = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(shuffled[pos : pos + size])
        pos += size
    return folds


_POSITIVE_LABELS = {1, True, "RA"}
_NEGATIVE_LABELS = {0, False, "nonRA"}


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


def auc(scores: Iterable[tuple[float, object]]) -> float:
    """ROC AUC as the tie-aware rank statistic over (probability, label) pairs."""
    pairs = list(scores)
    if not pairs:
        raise MetricUndefinedError("AUC of an empty score list is undefined")
    ps = np.array([float(p) for p, _ in pairs], dtype=np.float64)
    labels = []
    for _, lab in pairs:
        if lab in _POSITIVE_LABELS:
            labels.append(True)
        elif lab in _NEGATIVE_LABELS:
            labels.append(False)
        else:
            raise ValidationError(f"unrecognized label {lab!r}")
    pos = np.array(labels)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs both classes present")
    ranks = _average_ranks(ps)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
