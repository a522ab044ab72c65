"""Command-line harness.

Subcommands cover the full experiment loop: calibrate a material profile,
run the grasp-perturbation ablation, run the pouring comparison, replay a
recorded stream through the controller, benchmark per-cycle latency, and
plot a command log.

Exit codes: 0 on success, 1 when a task cannot produce its artifact
(for example an infeasible calibration), 2 on usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import cv2
import numpy as np

from .calibration import (
    CalibrationError,
    CalibrationProfile,
    build_recording,
    run_calibration,
)
from .controller import (
    Channel,
    ChannelMask,
    ControllerConfig,
    GripperCommand,
    OPEN_POSITION,
    Phase,
    begin_grasp,
    initial_state,
    step,
)
from .frames import (
    Side,
    StreamFormatError,
    StreamHeader,
    StreamWriter,
    iter_stream,
    read_manifest,
    write_manifest,
)
from .metrics import (
    aggregate,
    compute_trial_metrics,
    read_command_log,
    write_command_log,
    write_metrics_csv,
)
from .pipeline import FlowParams, ProxyExtractor
from .plant import load_preset
from .scenario import (
    CycleLog,
    ablation_script,
    calibration_frames,
    calibration_session,
    cycle_timestamp_us,
    pour_script,
    run_scenario,
)

DEFAULT_F_STOP = {"soft": 1.3, "hard": 5.5}

#: Command lock time for the frozen-grasp baseline arm, seconds into the
#: trial. Sits after the grasp settles and before the first scripted event.
FROZEN_AT_S = 2.0

ABLATION_CONFIGS = ("A", "B", "C", "D")


class CliInputError(Exception):
    pass


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--profile", type=Path, help="calibration profile JSON")
    sub.add_argument(
        "--preset", choices=("soft", "hard"), default="soft", help="plant preset"
    )
    sub.add_argument("--seed", type=int, default=0, help="base RNG seed")
    sub.add_argument(
        "--out-dir", type=Path, default=Path("."), help="directory for outputs"
    )
    sub.add_argument("--trials", type=int, default=5, help="trials per condition")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trex", description="reflexive grasp experiment harness"
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_cal = subs.add_parser("calibrate", help="derive a threshold profile")
    _add_common_flags(p_cal)
    p_cal.add_argument("--recording", type=Path, help="TRFX recording to calibrate from")
    p_cal.add_argument("--manifest", type=Path, help="segment manifest for --recording")
    p_cal.add_argument("--material", help="material label (default: preset name)")
    p_cal.add_argument("--f-stop", type=float, help="manual contact-stop force")
    p_cal.add_argument("--out", type=Path, help="profile output path")
    p_cal.add_argument(
        "--static-frames",
        type=int,
        default=3200,
        help="static-hold length for the synthesized session",
    )
    p_cal.set_defaults(func=cmd_calibrate)

    p_abl = subs.add_parser("ablate", help="grasp-perturbation trials per channel config")
    _add_common_flags(p_abl)
    p_abl.add_argument(
        "--config",
        choices=ABLATION_CONFIGS + ("all",),
        default="all",
        help="channel configuration to run",
    )
    p_abl.add_argument(
        "--record-streams",
        action="store_true",
        help="also write per-trial sensor streams",
    )
    p_abl.set_defaults(func=cmd_ablate)

    p_pour = subs.add_parser("pour", help="pouring trials, reflexes on and off")
    _add_common_flags(p_pour)
    p_pour.add_argument("--volume", choices=("low", "high", "both"), default="both")
    p_pour.add_argument("--reflex", choices=("on", "off", "both"), default="both")
    p_pour.add_argument("--record-streams", action="store_true")
    p_pour.set_defaults(func=cmd_pour)

    p_rep = subs.add_parser("replay", help="run the controller over a recorded stream")
    _add_common_flags(p_rep)
    p_rep.add_argument("stream", type=Path, help="TRFX stream to replay")
    p_rep.add_argument("--out", type=Path, help="command log output path")
    p_rep.set_defaults(func=cmd_replay)

    p_bench = subs.add_parser("bench", help="per-cycle latency at capture resolution")
    _add_common_flags(p_bench)
    p_bench.add_argument("--cycles", type=int, default=200)
    p_bench.add_argument("--height", type=int, default=480)
    p_bench.add_argument("--width", type=int, default=640)
    p_bench.set_defaults(func=cmd_bench)

    p_plot = subs.add_parser("plot", help="five-panel SVG from a command log")
    _add_common_flags(p_plot)
    p_plot.add_argument("log", type=Path, help="command log CSV")
    p_plot.add_argument("--out", type=Path, help="SVG output path")
    p_plot.set_defaults(func=cmd_plot)

    return parser


def trial_seed(base: int, index: int) -> int:
    """Stable per-trial plant seed derived from the base seed."""
    seq = np.random.SeedSequence((base, index))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def _require_profile(args: argparse.Namespace) -> CalibrationProfile:
    if args.profile is None:
        raise CliInputError("this command needs --profile (run `trex calibrate` first)")
    try:
        return CalibrationProfile.load(args.profile)
    except FileNotFoundError:
        raise CliInputError(f"profile not found: {args.profile}") from None
    except (KeyError, ValueError) as exc:
        raise CliInputError(f"unreadable profile {args.profile}: {exc}") from None


def _stream_pairs(path: Path) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    it = iter_stream(path)
    header = next(it)
    if header.sensor_count != 2:
        raise CliInputError(
            f"{path}: expected a two-sensor stream, found {header.sensor_count}"
        )
    for timestamp_us, images in it:
        yield timestamp_us, images[0], images[1]


def cmd_calibrate(args: argparse.Namespace) -> int:
    material = args.material or args.preset
    f_stop = args.f_stop if args.f_stop is not None else DEFAULT_F_STOP[args.preset]
    args.out_dir.mkdir(parents=True, exist_ok=True)
    out = args.out or (args.out_dir / f"profile_{material}.json")

    if (args.recording is None) != (args.manifest is None):
        raise CliInputError("--recording and --manifest must be given together")

    if args.recording is not None:
        stream_path, manifest_path = args.recording, args.manifest
        if not stream_path.exists():
            raise CliInputError(f"recording not found: {stream_path}")
    else:
        # synthesize the calibration rig session on the selected preset,
        # persisting the stream so the run is replayable from disk
        params = load_preset(args.preset, rng_seed=args.seed)
        session = calibration_session(params, static_frames=args.static_frames)
        stream_path = args.out_dir / f"calibration_{material}.trfx"
        manifest_path = args.out_dir / f"calibration_{material}.manifest"
        header = StreamHeader(
            height=params.image_height, width=params.image_width, sensor_count=2
        )
        with StreamWriter(stream_path, header) as writer:
            for ts, left, right in calibration_frames(session, params):
                writer.append(ts, (left, right))
        write_manifest(manifest_path, session.segments)
        print(f"wrote {stream_path} ({session.n_cycles} cycles) and {manifest_path}")

    segments = read_manifest(manifest_path)
    recording = build_recording(lambda: _stream_pairs(stream_path), segments)
    profile = run_calibration(recording, f_stop=f_stop, material_label=material)
    profile.save(out)

    print(f"profile -> {out}")
    print(f"{'threshold':<10} {'value':>14} {'percentile':>10} {'samples':>9}")
    for name in ("tau", "theta_s", "theta_q", "theta_c", "f_lim", "f_stop"):
        meta = profile.provenance.get(name, {})
        pct = meta.get("percentile")
        print(
            f"{name:<10} {getattr(profile, name):>14.6g} "
            f"{pct if pct is not None else '-':>10} {meta.get('sample_count', 0):>9}"
        )
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    profile = _require_profile(args)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    configs = ABLATION_CONFIGS if args.config == "all" else (args.config,)
    script = ablation_script()
    base_params = load_preset(args.preset)

    summary: dict[str, dict] = {}
    for letter in configs:
        config = ControllerConfig(
            profile=profile, channel_mask=ChannelMask.for_ablation(letter)
        )
        per_config = []
        for index in range(args.trials):
            seed = trial_seed(args.seed, index)
            params = replace(base_params, rng_seed=seed)
            writer = None
            if args.record_streams:
                header = StreamHeader(
                    height=params.image_height, width=params.image_width, sensor_count=2
                )
                writer = StreamWriter(
                    args.out_dir / f"ablate_{letter}_trial{index}.trfx", header
                )
            try:
                record = run_scenario(
                    script, params, config, task="hold", stream_writer=writer
                )
            finally:
                if writer is not None:
                    writer.close()
            write_command_log(
                args.out_dir / f"ablate_{letter}_trial{index}.csv", record.cycles
            )
            per_config.append(compute_trial_metrics(record, profile.theta_s))

        write_metrics_csv(args.out_dir / f"ablate_{letter}_metrics.csv", per_config)
        summary[letter] = _condition_summary(per_config)

    _write_summary(args.out_dir / "ablate_summary.json", summary)
    for letter, agg in summary.items():
        print(
            f"config {letter}: success {agg['success']}/{agg['trials']}"
            f" drops {agg['drops']} deformed {agg['deformed']}"
            f" delta_e {agg['delta_e_mean']:.1f} +/- {agg['delta_e_sd']:.1f}"
        )
    return 0


def _condition_summary(ms: Sequence) -> dict:
    de_mean, de_sd = aggregate([m.delta_e for m in ms])
    sf_mean, sf_sd = aggregate([m.slip_fraction for m in ms])
    return {
        "trials": len(ms),
        "success": sum(m.success for m in ms),
        "drops": sum(m.drop for m in ms),
        "deformed": sum(m.deformed for m in ms),
        "delta_e_mean": de_mean,
        "delta_e_sd": de_sd,
        "slip_fraction_mean": sf_mean,
        "slip_fraction_sd": sf_sd,
        "n_slip_total": sum(m.n_slip for m in ms),
    }


def _write_summary(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def cmd_pour(args: argparse.Namespace) -> int:
    profile = _require_profile(args)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    volumes = ("low", "high") if args.volume == "both" else (args.volume,)
    arms = ("on", "off") if args.reflex == "both" else (args.reflex,)
    base_params = load_preset(args.preset)
    config = ControllerConfig(profile=profile)

    summary: dict[str, dict] = {}
    for volume in volumes:
        script = pour_script(volume)
        for arm in arms:
            frozen = None if arm == "on" else FROZEN_AT_S
            metrics_rows = []
            poured = []
            for index in range(args.trials):
                seed = trial_seed(args.seed, index)
                params = replace(base_params, rng_seed=seed)
                writer = None
                if args.record_streams:
                    header = StreamHeader(
                        height=params.image_height,
                        width=params.image_width,
                        sensor_count=2,
                    )
                    writer = StreamWriter(
                        args.out_dir / f"pour_{volume}_{arm}_trial{index}.trfx", header
                    )
                try:
                    record = run_scenario(
                        script,
                        params,
                        config,
                        task="pour",
                        frozen_after_s=frozen,
                        stream_writer=writer,
                    )
                finally:
                    if writer is not None:
                        writer.close()
                write_command_log(
                    args.out_dir / f"pour_{volume}_{arm}_trial{index}.csv", record.cycles
                )
                metrics_rows.append(compute_trial_metrics(record, profile.theta_s))
                outcome = record.outcome
                poured.append(
                    outcome.poured_kg / outcome.water_initial_kg
                    if outcome.water_initial_kg
                    else 0.0
                )

            write_metrics_csv(
                args.out_dir / f"pour_{volume}_{arm}_metrics.csv", metrics_rows
            )
            agg = _condition_summary(metrics_rows)
            agg["poured_fraction_mean"] = sum(poured) / len(poured)
            summary[f"{volume}_{arm}"] = agg

    _write_summary(args.out_dir / "pour_summary.json", summary)
    for key, agg in summary.items():
        print(
            f"{key}: success {agg['success']}/{agg['trials']}"
            f" poured_mean {100.0 * agg['poured_fraction_mean']:.1f}%"
            f" slip_fraction {agg['slip_fraction_mean']:.3f} +/- {agg['slip_fraction_sd']:.3f}"
            f" drops {agg['drops']} deformed {agg['deformed']}"
        )
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    profile = _require_profile(args)
    if not args.stream.exists():
        raise CliInputError(f"stream not found: {args.stream}")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    out = args.out or (args.out_dir / f"replay_{args.stream.stem}.csv")

    config = ControllerConfig(profile=profile)
    extractor = ProxyExtractor(
        tau=profile.tau, gamma=profile.gamma, alpha=profile.alpha
    )
    # mirror the live loop exactly: the grasp begins at cycle zero
    state = begin_grasp(initial_state(config))
    command = GripperCommand(
        position=OPEN_POSITION, effort=config.e_init, fired=frozenset(), phase=Phase.CLOSING
    )

    logs: list[CycleLog] = []
    for cycle, (ts, left, right) in enumerate(_stream_pairs(args.stream)):
        sample = extractor.process(ts, left, right, idle=state.phase is Phase.IDLE)
        command, state = step(state, sample, config)
        logs.append(
            CycleLog(
                cycle=cycle,
                timestamp_us=ts,
                phase=command.phase,
                effort=command.effort,
                position=command.position,
                fired=tuple(
                    ch.value for ch in sorted(command.fired, key=tuple(Channel).index)
                ),
                sample=sample,
                cop_ref=state.cop_ref,
                tilt_deg=0.0,
                water_kg=0.0,
                pose_drift_deg=0.0,
                slide_velocity=0.0,
            )
        )

    write_command_log(out, logs)
    print(f"replayed {len(logs)} cycles -> {out}")
    return 0


def _bench_texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Speckle-like field with enough contrast for flow everywhere."""
    noise = rng.integers(0, 256, size=(height, width)).astype(np.uint8)
    blurred = cv2.GaussianBlur(noise, (0, 0), 1.5).astype(np.float32)
    lo, hi = blurred.min(), blurred.max()
    return (40.0 + 200.0 * (blurred - lo) / max(hi - lo, 1e-6)).astype(np.float32)


def _bench_window(height: int, width: int) -> np.ndarray:
    """Soft elliptical contact window at the sensors' usual patch scale."""
    ys = (np.arange(height, dtype=np.float32) - height / 2.0) / (0.175 * height)
    xs = (np.arange(width, dtype=np.float32) - width / 2.0) / (0.175 * width)
    r2 = ys[:, None] ** 2 + xs[None, :] ** 2
    return np.clip((1.0 - r2) / 0.15, 0.0, 1.0)


def run_bench(
    cycles: int = 200,
    height: int = 480,
    width: int = 640,
    seed: int = 0,
    tau: float = 20.0,
    profile: Optional[CalibrationProfile] = None,
) -> tuple[float, float]:
    """Time the full two-sensor cycle: proxies plus controller step.

    Returns (mean_ms, p95_ms) over ``cycles`` timed iterations. Frames are
    pre-rendered so generation cost stays out of the measurement.
    """
    if profile is None:
        profile = CalibrationProfile(
            tau=tau,
            theta_s=0.2,
            theta_q=0.06,
            theta_c=-9.5,
            f_lim=1e9,  # bench never fires protect
            f_stop=1.3,
            gamma=1.5,
            alpha=0.3,
            material_label="bench",
            provenance={},
            version=1,
            created_at=0,
        )
    rng = np.random.default_rng(seed)
    textures = [_bench_texture(rng, height, width) for _ in range(2)]
    window = _bench_window(height, width)

    frames: list[tuple[np.ndarray, np.ndarray]] = []
    # reference capture: darkness plus sensor noise
    dark = [
        np.clip(rng.normal(8.0, 2.0, size=(height, width)), 0, 255).astype(np.uint8)
        for _ in range(2)
    ]
    frames.append((dark[0], dark[1]))
    for cycle in range(cycles):
        pair = []
        for tex in textures:
            dy = 0.4 * cycle
            mat = np.float32([[1.0, 0.0, 0.0], [0.0, 1.0, dy % height]])
            shifted = cv2.warpAffine(
                tex, mat, (width, height), flags=cv2.INTER_LINEAR,
                borderMode=cv2.BORDER_WRAP,
            )
            img = shifted * window + rng.normal(8.0, 2.0, size=(height, width))
            pair.append(np.clip(img, 0, 255).astype(np.uint8))
        frames.append((pair[0], pair[1]))

    config = ControllerConfig(profile=profile)
    extractor = ProxyExtractor(
        tau=profile.tau, gamma=profile.gamma, alpha=profile.alpha
    )
    state = begin_grasp(initial_state(config))

    timings = []
    for index, (left, right) in enumerate(frames):
        ts = cycle_timestamp_us(index)
        t0 = time.perf_counter()
        sample = extractor.process(ts, left, right, idle=False)
        _, state = step(state, sample, config)
        elapsed = (time.perf_counter() - t0) * 1000.0
        if index > 0:  # first pass only captures references
            timings.append(elapsed)

    arr = np.asarray(timings)
    return float(arr.mean()), float(np.percentile(arr, 95))


def cmd_bench(args: argparse.Namespace) -> int:
    if args.cycles < 1:
        raise CliInputError("--cycles must be positive")
    mean_ms, p95_ms = run_bench(
        cycles=args.cycles, height=args.height, width=args.width, seed=args.seed
    )
    print(
        f"{args.cycles} cycles at {args.width}x{args.height}, two sensors: "
        f"mean {mean_ms:.1f} ms, p95 {p95_ms:.1f} ms"
    )
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    profile = _require_profile(args)
    if not args.log.exists():
        raise CliInputError(f"command log not found: {args.log}")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    out = args.out or (args.out_dir / (args.log.stem + ".svg"))

    from .plots import render_trace_svg  # defer: pulls in matplotlib

    rows = read_command_log(args.log)
    render_trace_svg(rows, profile, out)
    print(f"plot -> {out}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return 1
    except StreamFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
