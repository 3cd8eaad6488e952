"""Command-line entry points: synth, train, track, eval, bench.

Every subcommand accepts ``--config <yaml>`` plus ``--set key=value``
overrides. Reports are line-delimited JSON with sorted keys, so identical
runs produce identical bytes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from .config import ConfigError, load_config
from .geometry import Box3D, GridTrackError
from .kitti import kitti_to_tracklets
from .metrics import bucket_report, evaluate_ope, pool_results
from .pipeline import (TrainingDiverged, ZeroRegressor, regressor_from_config,
                       track_sequence, track_step, train)
from .synthetic import generate_synthetic, load_dataset, save_dataset


def _fail(message: str) -> None:
    sys.stderr.write(json.dumps({"error": message}, sort_keys=True) + "\n")


def _load_sequences(data_dir, data_format: str, category: str):
    data_dir = Path(data_dir)
    if data_format == "auto":
        data_format = "kitti" if (data_dir / "velodyne").is_dir() else "synthetic"
    if data_format == "kitti":
        return kitti_to_tracklets(data_dir, category)
    return load_dataset(data_dir)


def _sequence_names(sequences):
    names = []
    for i, seq in enumerate(sequences):
        name = seq.metadata.get("name")
        if name is None:
            track = seq.metadata.get("track_id")
            name = f"track_{track:04d}_{seq.metadata.get('first_frame', 0):04d}" \
                if track is not None else f"seq_{i:04d}"
        names.append(str(name))
    return names


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set)
    sequences = []
    for i in range(args.sequences):
        scene = dataclasses.replace(cfg.synthetic, seed=args.seed + i)
        sequences.append(generate_synthetic(scene, cfg.synthetic_num_frames))
    save_dataset(args.out, sequences)
    print(json.dumps({"written": args.out, "sequences": len(sequences)},
                     sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    dataset = _load_sequences(args.data, args.format, args.category)
    model = regressor_from_config(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        report = train(dataset, model,
                       epochs=cfg.train.epochs, lr=cfg.train.lr,
                       lr_schedule=cfg.train.lr_schedule,
                       betas=cfg.train.adam_betas, eps=cfg.train.adam_eps,
                       grad_accum=cfg.train.grad_accum,
                       jitter_translation=cfg.train.jitter_translation,
                       jitter_yaw=cfg.train.jitter_yaw,
                       seed=cfg.seed,
                       checkpoint_path=out_dir / "model.ckpt",
                       log_path=out_dir / "train.log")
    except TrainingDiverged as exc:
        dump = out_dir / "diverged.json"
        dump.write_text(json.dumps(exc.diagnostics, sort_keys=True) + "\n")
        raise GridTrackError(f"{exc} (diagnostics written to {dump})") from exc
    print(json.dumps({"checkpoint": report.checkpoint_path,
                      "epochs": len(report.epoch_losses),
                      "final_mean_loss": report.epoch_losses[-1],
                      "samples_per_epoch": report.samples_per_epoch,
                      "skipped_pairs": report.skipped_pairs}, sort_keys=True))
    return 0


def cmd_track(args) -> int:
    cfg = load_config(args.config, args.set)
    if not args.baseline and not args.checkpoint:
        raise ConfigError("track needs --checkpoint or --baseline")
    sequences = _load_sequences(args.data, args.format, args.category)
    if args.baseline:
        model = ZeroRegressor()
        model.crop_margin = cfg.crop_margin
    else:
        model = regressor_from_config(cfg, checkpoint=args.checkpoint)
    names = _sequence_names(sequences)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        for name, seq in zip(names, sequences):
            state = track_sequence(seq, model)
            fallbacks = set(state.fallback_frames)
            for t, box in enumerate(state.history, start=1):
                fh.write(json.dumps(
                    {"sequence": name, "frame": t,
                     "box": [*box.center.tolist(), *box.size.tolist(), box.yaw],
                     "fallback": t in fallbacks}, sort_keys=True) + "\n")
    print(json.dumps({"predictions": str(out_path),
                      "sequences": len(sequences)}, sort_keys=True))
    return 0


def _read_predictions(path) -> dict[str, list[tuple[int, Box3D, bool]]]:
    path = Path(path)
    if not path.exists():
        raise GridTrackError(f"predictions file not found: {path}")
    by_seq: dict[str, list[tuple[int, Box3D, bool]]] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            vals = rec["box"]
            box = Box3D(vals[0:3], vals[3:6], vals[6])
            by_seq.setdefault(rec["sequence"], []).append(
                (int(rec["frame"]), box, bool(rec.get("fallback", False))))
        except (KeyError, ValueError, TypeError) as exc:
            raise GridTrackError(f"{path}:{lineno}: bad record ({exc})") from exc
    for recs in by_seq.values():
        recs.sort(key=lambda r: r[0])
    return by_seq


def cmd_eval(args) -> int:
    sequences = _load_sequences(args.data, args.format, args.category)
    names = _sequence_names(sequences)
    predictions = _read_predictions(args.predictions)
    records = []
    per_sequence = []
    for name, seq in zip(names, sequences):
        if name not in predictions:
            raise GridTrackError(f"no predictions for sequence {name}")
        recs = predictions[name]
        expected = len(seq) - 1
        if len(recs) != expected:
            raise GridTrackError(
                f"{name}: {len(recs)} predictions for {expected} frames")
        boxes = [box for _, box, _ in recs]
        fallbacks = sum(1 for _, _, fb in recs if fb)
        result = evaluate_ope(boxes, seq.gt_boxes[1:], fallbacks)
        per_sequence.append((seq.metadata, result))
        records.append({"type": "sequence", "name": name,
                        "frames": result.frames,
                        "success": result.success,
                        "precision": result.precision,
                        "mean_center_error": result.mean_center_error,
                        "fallbacks": result.fallback_count})
    pooled = pool_results([r for _, r in per_sequence])
    records.append({"type": "aggregate", "sequences": len(per_sequence),
                    "frames": pooled.frames, "success": pooled.success,
                    "precision": pooled.precision,
                    "mean_center_error": pooled.mean_center_error,
                    "fallbacks": pooled.fallback_count})
    if args.bucket:
        report = bucket_report(per_sequence, args.bucket)
        for rec in report.as_records():
            rec["type"] = "bucket"
            records.append(rec)
        if report.excluded:
            records.append({"type": "bucket_warning", "axis": args.bucket,
                            "excluded": report.excluded})
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if args.plot:
        _write_plot(args.plot, [r for _, r in per_sequence])
    print(json.dumps({"report": str(out_path), "success": pooled.success,
                      "precision": pooled.precision}, sort_keys=True))
    return 0


def _write_plot(path, results) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import (PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS,
                          precision_curve, success_curve)
    import numpy as np

    ious = np.concatenate([r.ious for r in results])
    errors = np.concatenate([r.center_errors for r in results])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(SUCCESS_THRESHOLDS, success_curve(ious))
    ax1.set_xlabel("IoU threshold")
    ax1.set_ylabel("success rate")
    ax1.set_ylim(0, 1.02)
    ax2.plot(PRECISION_THRESHOLDS, precision_curve(errors))
    ax2.set_xlabel("center error threshold [m]")
    ax2.set_ylabel("fraction within")
    ax2.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_bench(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.checkpoint:
        model = regressor_from_config(cfg, checkpoint=args.checkpoint)
    else:
        model = regressor_from_config(cfg)
    scene = dataclasses.replace(cfg.synthetic, seed=args.seed)
    seq = generate_synthetic(scene, max(args.frames + 1, 2))
    from .pipeline import TrackerState

    state = TrackerState(seq.gt_boxes[0])
    for t in range(1, min(4, len(seq))):  # warm-up
        state = track_step(state, seq.frames[t - 1], seq.frames[t], model)
    state = TrackerState(seq.gt_boxes[0])
    start = time.perf_counter()
    steps = 0
    for t in range(1, len(seq)):
        state = track_step(state, seq.frames[t - 1], seq.frames[t], model)
        steps += 1
    elapsed = time.perf_counter() - start
    fps = steps / elapsed if elapsed > 0 else float("inf")
    record = {"type": "bench", "frames": steps,
              "elapsed_s": round(elapsed, 4), "fps": round(fps, 2)}
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(json.dumps(record, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridtrack",
        description="Voxel-based LiDAR single-object tracker")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path config override (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--sequences", type=int, default=10)
    p.add_argument("--seed", type=int, default=0,
                   help="base seed; sequence i uses seed+i")
    p.set_defaults(func=cmd_synth)

    def data_args(p):
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--format", choices=("auto", "synthetic", "kitti"),
                       default="auto")
        p.add_argument("--category", default="Car",
                       help="object category for KITTI ingestion")

    p = sub.add_parser("train", help="train a model")
    common(p)
    data_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the tracker over a dataset")
    common(p)
    data_args(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--baseline", action="store_true",
                   help="use the constant-position baseline")
    p.add_argument("--out", required=True, help="predictions JSONL path")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    data_args(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True, help="report JSONL path")
    p.add_argument("--bucket", choices=("sparsity", "distractors"), default=None)
    p.add_argument("--plot", default=None, help="optional PNG path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure tracking throughput")
    common(p)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None, help="optional report JSONL path")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        _fail(f"config: {exc}")
        return 2
    except GridTrackError as exc:
        _fail(str(exc))
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
