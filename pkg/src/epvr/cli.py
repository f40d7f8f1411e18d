"""Operator entry points: serve, synth, replay, bench.

Set EPVR_LOG to DEBUG/INFO/WARNING to control log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import core, eval as evalmod, net, pipeline

log = logging.getLogger("epvr")


def _load_config(path) -> pipeline.PipelineConfig:
    if path is None:
        return pipeline.PipelineConfig()
    with open(path) as fh:
        return pipeline.PipelineConfig.from_dict(json.load(fh))


ABLATABLE = ("keypoints", "fusion", "refine", "filter", "kpo")


def apply_ablation(config: pipeline.PipelineConfig, stages) -> pipeline.PipelineConfig:
    """Disable the named stages (mirrors the toggle combinations of the
    accuracy table rows)."""
    doc = config.to_dict()
    for stage in stages:
        if stage not in ABLATABLE:
            raise ValueError(f"unknown stage {stage!r}; choose from {ABLATABLE}")
        if stage == "keypoints":
            doc["use_keypoints"] = False
            doc["use_fusion"] = False
        elif stage == "fusion":
            doc["use_fusion"] = False
        elif stage == "refine":
            # keypoints pass through unmasked: zeta filters stay untouched
            doc["use_keypoints"] = False
            doc["use_fusion"] = False
        elif stage == "filter":
            doc["use_filter"] = False
        elif stage == "kpo":
            doc["use_kpo"] = False
    return pipeline.PipelineConfig.from_dict(doc)


def cmd_serve(args) -> int:
    if not os.path.exists(args.models):
        print(f"error: registry file not found: {args.models}", file=sys.stderr)
        return 2
    try:
        with open(args.models) as fh:
            registry_doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: cannot read registry {args.models}: {e}", file=sys.stderr)
        return 2
    default_cfg = _load_config(args.config)
    registry = {}
    for name, entry in registry_doc.get("models", {}).items():
        if "config" in entry:
            registry[name] = pipeline.PipelineConfig.from_dict(entry["config"])
        else:
            registry[name] = default_cfg
    if not registry:
        print(f"error: registry {args.models} defines no models", file=sys.stderr)
        return 2
    host, _, port = args.addr.partition(":")
    server = net.serve((host or "127.0.0.1", int(port or 0)), registry)
    print(f"serving {sorted(registry)} on {server.address[0]}:{server.address[1]}")
    try:
        while True:
            time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


def cmd_synth(args) -> int:
    seq = evalmod.generate_sequence(args.motion, args.duration, args.rate, args.seed)
    motion_path = args.out + ".motion.jsonl"
    keypoint_path = args.out + ".keypoints.jsonl"
    pipeline.write_sequence_files(
        seq, motion_path, keypoint_path, noise_sigma=args.noise, noise_seed=args.seed
    )
    print(f"wrote {motion_path} and {keypoint_path} ({seq.frame_count} frames)")
    return 0


def cmd_replay(args) -> int:
    config = _load_config(args.config)
    if args.ablate:
        config = apply_ablation(config, [s.strip() for s in args.ablate.split(",") if s.strip()])
    if config.predictor == "replay" and not config.replay_file:
        config = pipeline.PipelineConfig.from_dict(
            {**config.to_dict(), "replay_file": args.motion}
        )
    report = pipeline.run_replay(args.motion, args.keypoints, config)
    if args.json:
        doc = {
            "frames": report.frames,
            "fps": report.fps,
            "metrics": {k: {"mean": v[0], "std": v[1]} for k, v in report.metrics.items()},
        }
        text = json.dumps(doc, indent=2) + "\n"
    else:
        text = report.render()
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def _bench_once(config, frames, seq):
    session = pipeline.PipelineSession(config)
    kp = None
    stage_totals = dict.fromkeys(pipeline.STAGES, 0.0)
    n = seq.frame_count
    t0 = time.perf_counter()
    for i in range(frames):
        j = i % n
        ts_shift = (i // n) * (n / seq.rate)
        head, left, right = seq.head[j], seq.left[j], seq.right[j]
        if ts_shift:
            head = core.DevicePose(
                head.timestamp + ts_shift, head.position, head.orientation,
                head.linear_velocity, head.angular_velocity,
            )
            left = core.DevicePose(
                left.timestamp + ts_shift, left.position, left.orientation,
                left.linear_velocity, left.angular_velocity,
            )
            right = core.DevicePose(
                right.timestamp + ts_shift, right.position, right.orientation,
                right.linear_velocity, right.angular_velocity,
            )
        if config.use_keypoints:
            kp = (seq.keypoints_cam[j], seq.visibility[j].astype(np.float64))
        result = session.process_frame(head, left, right, kp)
        for stage in pipeline.STAGES:
            stage_totals[stage] += result.latencies[stage]
    wall = time.perf_counter() - t0
    return frames / wall, {k: v / frames for k, v in stage_totals.items()}


def cmd_bench(args) -> int:
    config = _load_config(args.config)
    seq = evalmod.generate_sequence("walk", min(args.frames, 600) / 60.0, 60.0, seed=7)
    if config.predictor == "replay" and not config.replay_file:
        print("error: replay predictor benchmarks need replay_file in the config",
              file=sys.stderr)
        return 2
    fps_runs = []
    stage_means = None
    for _ in range(args.runs):
        fps, stages = _bench_once(config, args.frames, seq)
        fps_runs.append(fps)
        stage_means = stages
    mean, std = evalmod.summarize(fps_runs)
    print(f"fps {mean:.1f} ± {std:.1f}  ({args.runs} runs x {args.frames} frames)")
    for stage in pipeline.STAGES:
        print(f"stage.{stage}_us {stage_means[stage]:.1f}")
    if args.e2e:
        fps_e2e = _bench_end_to_end(config, min(args.frames, 2000), seq)
        print(f"fps_end_to_end {fps_e2e:.1f}")
    return 0


def _bench_end_to_end(config, frames, seq):
    """Lock-step round trips through a loopback server."""
    server = net.serve(("127.0.0.1", 0), {"bench": config})
    client = net.Client(*server.address)
    try:
        client.hello("bench")
        n = seq.frame_count
        t0 = time.perf_counter()
        done = 0
        for i in range(frames):
            j = i % n
            client.send_hmd(seq.head[j], seq.left[j], seq.right[j])
            env = client.recv()
            if env is None or env.kind != net.Kind.POSE_RESULT:
                break
            done += 1
            if j == n - 1:
                break  # timestamps must keep increasing; one pass is enough
        wall = time.perf_counter() - t0
        return done / wall if wall > 0 else 0.0
    finally:
        client.close()
        server.close()


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("EPVR_LOG", "WARNING"))
    parser = argparse.ArgumentParser(
        prog="epvr", description="egocentric full-body pose pipeline tools"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the inference server")
    p.add_argument("--addr", default="127.0.0.1:9464")
    p.add_argument("--models", required=True, help="model registry JSON file")
    p.add_argument("--config", default=None, help="default pipeline config JSON")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("synth", help="generate a synthetic replay")
    p.add_argument("--motion", default="walk", choices=evalmod.MOTION_KINDS)
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("--rate", type=float, default=60.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="keypoint noise sigma (m)")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("replay", help="replay files through the pipeline and report metrics")
    p.add_argument("--motion", required=True)
    p.add_argument("--keypoints", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--ablate", default=None, help=f"comma-separated stages {ABLATABLE}")
    p.add_argument("--report", default=None, help="also write the report to this file")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("bench", help="measure pipeline throughput")
    p.add_argument("--config", default=None)
    p.add_argument("--frames", type=int, default=2000)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--e2e", action="store_true", help="also measure loopback round trips")
    p.set_defaults(fn=cmd_bench)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:
        log.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
