"""Command-line entry points.

Exit codes: 0 on success, 2 on configuration errors, 3 on input-format or
input-validation errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import synth
from .detector import (
    DetectorModel,
    TrainConfig,
    auc,
    default_config,
    init_model,
    kfold_split,
    score_clips,
    train,
)
from .diffing import event_ldp_stats, write_ldp_stats_csv
from .errors import ConfigurationError, FormatError, SlactionError, ValidationError
from .estimator import AhiModel, fit_huber
from .runtime import (
    REFERENCE_EMBEDDED_8H_MIN,
    REFERENCE_EMBEDDED_TOTAL_S,
    PipelineConfig,
    analyze_night,
    benchmark,
)
from .video_io import load_annotations, open_night
from .windowing import ClipStore, WindowPlan, curate_training_clips, write_clip_dir


def _add_plan_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window", type=float, default=60.0, help="window length in seconds")
    p.add_argument("--step", type=float, default=30.0, help="window step in seconds")
    p.add_argument("--fps-target", type=float, default=2.5, help="sampling rate for clips")
    p.add_argument("--clip-w", type=int, default=160)
    p.add_argument("--clip-h", type=int, default=120)


def _plan_from_args(args: argparse.Namespace) -> WindowPlan:
    return WindowPlan(
        window_s=args.window,
        step_s=args.step,
        fps_target=args.fps_target,
        clip_w=args.clip_w,
        clip_h=args.clip_h,
    )


def _cmd_synth(args: argparse.Namespace) -> int:
    if args.cohort is not None:
        lo, hi = (float(v) for v in args.severities.split(":"))
        manifest = synth.generate_cohort(
            n_nights=args.cohort,
            severities=("linspace", lo, hi),
            seed=args.seed,
            out_dir=args.out,
            duration_s=args.duration,
            fps=args.fps,
            width=args.width,
            height=args.height,
        )
        print(f"wrote {len(manifest.entries)} nights to {args.out}")
        return 0
    overrides = {}
    if args.config is not None:
        overrides = synth.config_from_json(Path(args.config))
        cfg = overrides
    else:
        cfg = synth.SynthConfig(
            duration_s=args.duration,
            fps=args.fps,
            width=args.width,
            height=args.height,
            seed=args.seed,
        )
    _, gt = synth.generate_night(cfg, args.out)
    print(f"wrote night to {args.out}: true AHI {gt.true_ahi:.2f}, counts {gt.counts()}")
    return 0


def _cmd_curate(args: argparse.Namespace) -> int:
    night_dirs = [
        line.strip()
        for line in Path(args.nights).read_text().splitlines()
        if line.strip() and not line.strip().startswith("#")
    ]
    if not night_dirs:
        raise ValidationError(f"{args.nights}: no night directories listed")
    nights = [open_night(d) for d in night_dirs]
    plan = _plan_from_args(args)
    result = curate_training_clips(nights, plan, seed=args.seed)
    write_clip_dir(result.clips, args.out, patient_ids=result.patient_ids)
    print(
        f"curated {len(result.clips)} clips ({result.n_positive} RA / {result.n_negative} nonRA), "
        f"skipped {result.n_skipped} onsets"
    )
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    store = ClipStore(args.clips)
    sample = store[0]
    config = default_config()
    if sample.diffs.shape != (config.input_t, config.input_h, config.input_w):
        t, h, w = sample.diffs.shape
        config = default_config().__class__(
            blocks=config.blocks,
            head_hidden=config.head_hidden,
            input_t=t,
            input_h=h,
            input_w=w,
            param_budget_bytes=config.param_budget_bytes,
        )
    tc = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed
    )
    indices = list(range(len(store)))
    labels = store.labels
    patients = store.patient_ids

    if args.folds > 1:
        unique_patients = sorted(set(patients))
        folds = kfold_split(unique_patients, args.folds, seed=args.seed)
        fold_aucs = []
        for fi, fold_patients in enumerate(folds):
            held = set(fold_patients)
            train_idx = [i for i in indices if patients[i] not in held]
            val_idx = [i for i in indices if patients[i] in held]
            if not train_idx or not val_idx:
                continue
            model = init_model(config, seed=args.seed)
            fitted, _ = train(
                model,
                _Subset(store, train_idx),
                tc,
                val_clips=_Subset(store, val_idx),
            )
            ps = score_clips(fitted, _Subset(store, val_idx))
            try:
                fold_auc = auc(list(zip(ps, [labels[i] for i in val_idx])))
            except SlactionError:
                continue
            fold_aucs.append(fold_auc)
            print(f"fold {fi}: AUC {fold_auc:.4f} ({len(val_idx)} clips held out)")
        if fold_aucs:
            print(f"mean AUC over {len(fold_aucs)} folds: {np.mean(fold_aucs):.4f}")

    model = init_model(config, seed=args.seed)
    fitted, history = train(model, store, tc)
    fitted.save(args.out)
    print(
        f"trained on {len(store)} clips for {len(history.train_loss)} epochs, "
        f"final loss {history.train_loss[-1]:.4f}; saved {args.out}"
    )
    return 0


class _Subset:
    def __init__(self, store, indices):
        self.store = store
        self.indices = list(indices)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        return self.store[self.indices[i]]

    @property
    def labels(self):
        all_labels = self.store.labels
        return [all_labels[i] for i in self.indices]


def _cmd_eval(args: argparse.Namespace) -> int:
    model = DetectorModel.load(args.model)
    store = ClipStore(args.clips)
    labels = store.labels
    ps = score_clips(model, store)
    overall = auc(list(zip(ps, labels)))
    if args.folds > 1:
        patients = store.patient_ids
        folds = kfold_split(sorted(set(patients)), args.folds, seed=args.seed)
        fold_aucs = []
        for fi, fold_patients in enumerate(folds):
            held = set(fold_patients)
            idx = [i for i in range(len(store)) if patients[i] in held]
            try:
                fold_auc = auc([(ps[i], labels[i]) for i in idx])
            except SlactionError:
                continue
            fold_aucs.append(fold_auc)
            print(f"fold {fi}: AUC {fold_auc:.4f} ({len(idx)} clips)")
        if fold_aucs:
            print(f"mean AUC over {len(fold_aucs)} folds: {np.mean(fold_aucs):.4f}")
    print(f"overall AUC: {overall:.4f} over {len(store)} clips")
    return 0


def _cmd_analyze(args: argparse.Namespace) -> int:
    cfg = PipelineConfig(
        model_path=args.model,
        ahi_model_path=args.ahi_model,
        plan=_plan_from_args(args),
        theta=args.theta,
        realtime=args.realtime,
        max_buffer_frames=args.max_buffer_frames,
    )
    result = analyze_night(
        args.night, cfg, mode=args.mode, out_report=args.out, out_scores=args.scores
    )
    r = result.report
    print(
        f"{args.night}: {len(r.ra_events)} arousal events over {r.tib_h:.2f} h "
        f"(ratio {r.ra_ratio:.2f}/h), estimated AHI {r.ahi_estimate:.2f}, "
        f"apnea screening {'positive' if r.osa_positive else 'negative'}"
    )
    projected_min = result.mean_clip_process_s * 959 / 60.0
    print(
        f"mean per-clip processing {result.mean_clip_process_s * 1e3:.1f} ms; projected "
        f"8-hour retrospective run {projected_min:.1f} min "
        f"(embedded reference ~{REFERENCE_EMBEDDED_8H_MIN:.0f} min)"
    )
    if cfg.realtime and result.deadline_misses:
        print(f"warning: {result.deadline_misses} clips missed the {cfg.plan.step_s:.0f}s deadline")
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    report = benchmark(args.model, _plan_from_args(args), n_clips=args.clips, seed=args.seed)
    print(f"model load:      {report.model_load_s * 1e3:8.1f} ms")
    print(
        f"preprocess/clip: {report.preprocess_mean_s * 1e3:8.1f} ms "
        f"(sd {report.preprocess_sd_s * 1e3:.1f})"
    )
    print(
        f"inference/clip:  {report.inference_mean_s * 1e3:8.1f} ms "
        f"(sd {report.inference_sd_s * 1e3:.1f})"
    )
    print(
        f"total/clip:      {report.total_mean_s * 1e3:8.1f} ms "
        f"(sd {report.total_sd_s * 1e3:.1f}); deadline {report.deadline_s:.0f} s; "
        f"realtime {'ok' if report.realtime_ok else 'MISSED'}"
    )
    print(f"peak RSS:        {report.peak_rss_bytes / 1e6:8.1f} MB")
    print(
        f"projected 8-hour retrospective run: {report.projected_8h_s / 60:.1f} min; "
        f"embedded reference total {REFERENCE_EMBEDDED_TOTAL_S:.3f} s/clip "
        f"(~{REFERENCE_EMBEDDED_8H_MIN:.0f} min per 8 h)"
    )
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_ldp_stats(args: argparse.Namespace) -> int:
    night = open_night(args.night)
    events = load_annotations(args.events) if args.events else (night.annotations or [])
    stats = event_ldp_stats(
        night, events, tau=args.tau, mode=args.mode, window_s=args.window
    )
    write_ldp_stats_csv(stats, args.out)
    for s in stats:
        print(f"{s.kind:>13}: {s.mean_ldp:10.2f} mean LDPs over {s.n_images} images")
    return 0


def _cmd_fit_ahi(args: argparse.Namespace) -> int:
    xs, ys = [], []
    with open(args.points, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["ra_ratio", "ahi"]:
            raise FormatError(f"{args.points}: expected header ra_ratio,ahi")
        for row in reader:
            xs.append(float(row[0]))
            ys.append(float(row[1]))
    model = fit_huber(xs, ys, delta=args.delta)
    model.save(args.out)
    print(f"fitted slope {model.slope:.4f}, intercept {model.intercept:.4f}; saved {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slaction",
        description="Sleep-video apnea screening: synthesis, curation, training, analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic night (or cohort) with ground truth")
    p.add_argument("--config", default=None, help="JSON file of generator settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=1200.0)
    p.add_argument("--fps", type=float, default=5.0)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--cohort", type=int, default=None, help="generate this many nights")
    p.add_argument("--severities", default="0:60", help="cohort AHI range lo:hi")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("curate", help="select labeled training clips from annotated nights")
    p.add_argument("--nights", required=True, help="text file listing night directories")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_plan_args(p)
    p.set_defaults(func=_cmd_curate)

    p = sub.add_parser("train", help="train the clip classifier on a curated clip directory")
    p.add_argument("--clips", required=True)
    p.add_argument("--folds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a clip directory and report AUC")
    p.add_argument("--model", required=True)
    p.add_argument("--clips", required=True)
    p.add_argument("--folds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("analyze", help="full pipeline over one night")
    p.add_argument("--night", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--ahi-model", required=True)
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--realtime", action="store_true")
    p.add_argument("--mode", choices=("streaming", "batch"), default="streaming")
    p.add_argument("--max-buffer-frames", type=int, default=1200)
    p.add_argument("--out", default=None, help="night report JSON path")
    p.add_argument("--scores", default=None, help="per-window scores CSV path")
    _add_plan_args(p)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("bench", help="latency/memory benchmark on synthetic clips")
    p.add_argument("--model", required=True)
    p.add_argument("--clips", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", default=None, help="also write the report as JSON")
    _add_plan_args(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("ldp-stats", help="per-event-kind large-difference-pixel statistics")
    p.add_argument("--night", required=True)
    p.add_argument("--events", default=None, help="annotation JSON (default: night's own)")
    p.add_argument("--tau", type=int, default=20)
    p.add_argument("--mode", choices=("within", "pre"), default="within")
    p.add_argument("--window", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ldp_stats)

    p = sub.add_parser("fit-ahi", help="fit the ratio-to-AHI regressor from a points CSV")
    p.add_argument("--points", required=True, help="CSV with header ra_ratio,ahi")
    p.add_argument("--delta", type=float, default=1.35)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit_ahi)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (FormatError, ValidationError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 3
    except SlactionError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
