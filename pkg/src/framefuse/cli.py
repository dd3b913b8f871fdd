"""Command-line interface: stabilize, train, evaluate, synth-data.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import media, metrics, networks, pipeline, training

EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stab", description="Full-frame video stabilization toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stabilize", help="render a stabilized frame sequence")
    p.add_argument("--config", required=True, help="JSON project configuration")
    p.add_argument("--auto-smooth", action="store_true",
                   help="derive warp fields with the built-in smoother")
    p.add_argument("--fusion", choices=media.FUSION_SPACES, default=None,
                   help="override fusion_space")
    p.add_argument("--weights", choices=media.FUSION_FUNCTIONS, default=None,
                   help="override fusion_function")
    p.add_argument("--no-detail-transfer", action="store_true")
    p.add_argument("--no-path-adjust", action="store_true")
    p.add_argument("--checkpoint", default=None, help="override checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-path", default=None,
                   help="write the adjustment path as CSV (k,x,y,energy_contrib)")

    p = sub.add_parser("evaluate", help="compute stabilization metrics")
    p.add_argument("input_dir")
    p.add_argument("output_dir")
    p.add_argument("--report", default=None, help="write the report as JSON")
    p.add_argument("--traces", default=None, help="write per-frame traces as CSV")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth-data", help="synthesize training samples from clips")
    p.add_argument("src", help="directory of clips (frame directories)")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", type=int, default=64, help="square crop size")
    p.add_argument("--jitter", type=int, default=None,
                   help="max jitter in px (default: 10%% of crop size)")
    p.add_argument("--flows", choices=("exact", "estimated"), default="exact",
                   help="inter-crop flows: exact constants or the fallback estimator")

    p = sub.add_parser("train", help="train the fusion networks")
    p.add_argument("--data", required=True, help="dataset directory from synth-data")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--space", choices=training.TRAIN_SPACES, default="hybrid")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-dim", type=int, default=networks.DEFAULT_FEATURE_DIM)
    p.add_argument("--enc-hidden", type=int, default=16)
    p.add_argument("--wn-hidden", type=int, default=64)
    p.add_argument("--gen-base", type=int, default=64)
    p.add_argument("--trace", default=None, help="write the loss trace as CSV")
    return parser


def _cmd_stabilize(args) -> int:
    config = media.load_config(args.config)
    if args.fusion:
        config.fusion_space = args.fusion
    if args.weights:
        config.fusion_function = args.weights
    if args.checkpoint:
        config.checkpoint = args.checkpoint
    if args.no_detail_transfer:
        config.detail_transfer = False
    config.validate()
    run = pipeline.stabilize(
        config,
        auto_smooth=args.auto_smooth,
        path_adjust=not args.no_path_adjust,
        seed=args.seed,
    )
    print(f"wrote {len(run.hole_fractions)} frames to {run.output_dir}")
    print(f"mean hole fraction: {np.mean(run.hole_fractions):.6f}")
    if args.dump_path:
        with open(args.dump_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["k", "x", "y", "energy_contrib"])
            for k, (x, y) in enumerate(run.path):
                writer.writerow([k, x, y, f"{run.hole_fractions[k]:.6f}"])
    return 0


def _cmd_evaluate(args) -> int:
    inp = media.read_frame_sequence(args.input_dir)
    out = media.read_frame_sequence(args.output_dir)
    report = metrics.evaluate_stabilization(
        inp, out, pipeline.pairwise_flow_estimator, seed=args.seed
    )
    print(json.dumps(report.to_dict(), indent=2))
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    if args.traces:
        with open(args.traces, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "crop", "distortion", "flow"])
            for k in range(len(report.crop_trace)):
                flow_v = report.flow_trace[k] if k < len(report.flow_trace) else ""
                writer.writerow(
                    [k, report.crop_trace[k], report.distortion_trace[k], flow_v]
                )
    return 0


def _cmd_synth_data(args) -> int:
    clips = []
    for name in sorted(os.listdir(args.src)):
        path = os.path.join(args.src, name)
        if os.path.isdir(path):
            clips.append(media.read_frame_sequence(path))
    if not clips:
        raise media.ConfigError(f"no clip directories under {args.src}")
    jitter = args.jitter if args.jitter is not None else max(1, args.crop // 10)
    provider = None
    if args.flows == "estimated":
        provider = pipeline.pairwise_flow_estimator
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.n):
        clip = clips[int(rng.integers(0, len(clips)))]
        sample = training.synthesize_sample(
            clip, (args.crop, args.crop), jitter, rng, provider=provider
        )
        training.save_sample(os.path.join(args.out, f"sample_{i:05d}"), sample)
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    samples = training.load_dataset(args.data)
    config = training.TrainConfig(
        steps=args.steps,
        learning_rate=args.lr,
        seed=args.seed,
        fusion_space=args.space,
        feature_dim=args.feature_dim,
        enc_hidden=args.enc_hidden,
        wn_hidden=args.wn_hidden,
        gen_base=args.gen_base,
    )
    models, trace = training.train_run(samples, config)
    networks.save_checkpoint(args.out, models, step=config.steps)
    if args.trace:
        training.write_trace_csv(args.trace, trace)
    final = trace[-1]
    print(f"trained {config.steps} steps ({args.space}); "
          f"final loss {final[1]:.6f}, psnr {final[2]:.2f} dB")
    print(f"checkpoint written to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else 0
    handlers = {
        "stabilize": _cmd_stabilize,
        "evaluate": _cmd_evaluate,
        "synth-data": _cmd_synth_data,
        "train": _cmd_train,
    }
    try:
        return handlers[args.command](args)
    except (media.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
