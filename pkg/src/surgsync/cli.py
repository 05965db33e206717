"""Command-line entry points.

Exit codes: 0 on success, 1 for anything the user can fix (bad arguments,
failed validation, malformed inputs), 2 for unexpected internal failures.
The default output root comes from $SURGSYNC_OUT, falling back to ./data.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import threading
import zlib
from pathlib import Path

import numpy as np

from . import analysis, offline, online, postprocess, store
from .streams import (
    StreamDescriptor,
    StreamKind,
    SyntheticSourceConfig,
    Timestamp,
    open_synthetic_source,
)

DEFAULT_OUT = "data"


class CliError(Exception):
    """User-correctable failure; rendered as an error line, exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); keep usage errors at 1
        raise CliError(message)


def mix_seed(base: int, stream_id: str) -> int:
    """Stable per-stream seed derived from one base seed."""
    return (base * 0x9E3779B1 + zlib.crc32(stream_id.encode())) % (2**32)


def default_rig(seed: int):
    """A small stereo-plus-side camera rig with two arms and two latched
    contact channels, jittered and offset differently per stream."""

    def make(sid, kind, rate, arity=0, view=None, jitter=1.0, drop=0.0, offset=0.0):
        return SyntheticSourceConfig(
            descriptor=StreamDescriptor(
                stream_id=sid, kind=kind, nominal_rate_hz=rate, arity=arity, view=view
            ),
            jitter_std_ms=jitter,
            drop_probability=drop,
            latency_offset_ms=offset,
            seed=mix_seed(seed, sid),
        )

    return [
        make("left_image", StreamKind.IMAGE, 30.0, view="left", jitter=0.8),
        make("right_image", StreamKind.IMAGE, 30.0, view="right", jitter=0.8, offset=1.0),
        make("side_image", StreamKind.IMAGE, 15.0, view="side", jitter=1.2, offset=2.0),
        make("psm1_pose", StreamKind.NUMERIC, 100.0, arity=7, jitter=0.5, offset=0.5, drop=0.01),
        make("psm2_pose", StreamKind.NUMERIC, 100.0, arity=7, jitter=0.5, offset=1.5, drop=0.01),
        make("contact_left", StreamKind.LATCHED_NUMERIC, 50.0, arity=1, jitter=0.5),
        make("contact_right", StreamKind.LATCHED_NUMERIC, 50.0, arity=1, jitter=0.5),
    ]


def load_stream_configs(path: Path, seed=None):
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list) or not raw:
        raise CliError(f"{path}: expected a nonempty JSON list of stream configs")
    configs = [SyntheticSourceConfig.from_dict(d) for d in raw]
    if seed is not None:
        configs = [
            dataclasses.replace(c, seed=mix_seed(seed, c.descriptor.stream_id))
            for c in configs
        ]
    return configs


def _resolve_out(args) -> Path:
    return Path(args.out or os.environ.get("SURGSYNC_OUT") or DEFAULT_OUT)


def _resolve_target(positional, flag, what) -> Path:
    """Commands accept their run/capture directory positionally or via --run."""
    if positional and flag:
        raise CliError(f"give the {what} once, not twice")
    target = flag or positional
    if not target:
        raise CliError(f"missing {what}")
    return Path(target)


def _build_sources(args):
    if args.streams:
        configs = load_stream_configs(Path(args.streams), seed=args.seed)
    else:
        configs = default_rig(args.seed if args.seed is not None else 0)
    if args.duration <= 0:
        raise CliError("--duration must be positive")
    end = Timestamp.from_s(args.duration)
    return [open_synthetic_source(c, end) for c in configs], configs


def _default_reference(configs) -> str:
    for c in configs:
        if c.descriptor.kind == StreamKind.IMAGE:
            return c.descriptor.stream_id
    raise CliError("no image stream to use as reference")


def _watch_for_quit(stop_event: threading.Event) -> None:
    import select

    if not sys.stdin.isatty():
        return
    while not stop_event.is_set():
        ready, _, _ = select.select([sys.stdin], [], [], 0.2)
        if ready:
            ch = sys.stdin.read(1)
            if ch and ch.lower() == "q":
                stop_event.set()
                return


# --- subcommands -------------------------------------------------------------


def cmd_record_online(args) -> int:
    sources, configs = _build_sources(args)
    reference = args.reference or _default_reference(configs)
    config = online.SyncConfig(
        reference_stream=reference,
        tolerance_ms=args.tolerance_ms,
        queue_capacity=args.queue_cap,
        writer_pool_size=args.writers,
    )
    out_root = _resolve_out(args)
    if args.realtime:
        stop_event = threading.Event()
        watcher = threading.Thread(
            target=_watch_for_quit, args=(stop_event,), daemon=True
        )
        watcher.start()
        print("recording (press q to stop)...")
        manifest = online.record_online_paced(
            sources,
            config,
            out_root,
            run_id=args.run_id,
            tee_raw=args.tee_raw,
            stop_event=stop_event,
            speed=args.speed,
        )
    else:
        manifest = online.record_online(
            sources, config, out_root, run_id=args.run_id, tee_raw=args.tee_raw
        )
    print(f"run {manifest.run_id}: {manifest.packet_count} packets, "
          f"{manifest.reject_count} rejected, {manifest.drop_count} dropped "
          f"-> {out_root / ('run_' + manifest.run_id)}")
    if manifest.dirty:
        print("warning: run is marked dirty", file=sys.stderr)
        for w in manifest.warnings:
            print(f"  {w}", file=sys.stderr)
    return 0


def cmd_record_offline(args) -> int:
    sources, configs = _build_sources(args)
    out_root = _resolve_out(args)
    raw_dir = offline.record_offline(
        sources, args.fps, out_root, run_id=args.run_id
    )
    print(f"raw capture -> {raw_dir}")
    if args.match:
        reference = args.reference
        if reference is None:
            reference = next(
                c.descriptor.label
                for c in configs
                if c.descriptor.kind == StreamKind.IMAGE
            )
        manifest = offline.match_offline(
            raw_dir,
            out_root,
            reference_view=reference,
            method=args.method,
            run_id=args.run_id,
        )
        print(f"run {manifest.run_id}: {manifest.packet_count} packets "
              f"-> {out_root / ('run_' + manifest.run_id)}")
    return 0


def cmd_match(args) -> int:
    raw_dir = _resolve_target(args.raw_dir, args.run, "raw capture directory")
    out_root = _resolve_out(args)
    manifest = offline.match_offline(
        raw_dir,
        out_root,
        reference_view=args.reference,
        method=args.method,
        run_id=args.run_id,
    )
    print(f"run {manifest.run_id}: {manifest.packet_count} packets "
          f"-> {out_root / ('run_' + manifest.run_id)}")
    return 0


def cmd_analyze_latency(args) -> int:
    run_dir = _resolve_target(args.run_dir, args.run, "run directory")
    doc = analysis.latency_report_doc(
        run_dir, bin_width_ms=args.bin_ms, reference=args.reference
    )
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
        print(f"report -> {args.out}")
        return 0
    if args.json:
        print(json.dumps(doc, indent=1))
        return 0

    print(f"{'stream':24s} {'count':>6s} {'mean':>8s} {'std':>8s} "
          f"{'median':>8s} {'min':>8s} {'max':>8s}  (ms)")
    for sid, s in sorted(doc["streams"].items()):
        print(f"{sid:24s} {s['count']:6d} {s['mean_ms']:8.3f} {s['std_ms']:8.3f} "
              f"{s['median_ms']:8.3f} {s['min_ms']:8.3f} {s['max_ms']:8.3f}")
    hist = doc["histogram"]
    edges, counts = hist["edges_ms"], hist["counts"]
    print(f"\npooled offsets, {hist['bin_width_ms']} ms bins:")
    total = sum(counts) or 1
    for i, c in enumerate(counts):
        bar = "#" * round(40 * c / total)
        print(f"  [{edges[i]:5.2f}, {edges[i + 1]:5.2f}) {c:6d} {bar}")
    if doc["frequency"]:
        freq = doc["frequency"]
        print(f"\nreference rate: mean {freq['mean_hz']:.3f} Hz, "
              f"std {freq['std_hz']:.6f} Hz")
    return 0


def cmd_validate(args) -> int:
    violations = store.validate_run(Path(args.run_dir))
    if not violations:
        print("ok")
        return 0
    for v in violations:
        print(f"violation: {v}")
    return 1


def _load_json_file(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"{path}: {exc}")


def cmd_reproject(args) -> int:
    run_dir = _resolve_target(args.run_dir, args.run, "run directory")
    manifest = store.load_manifest(run_dir)
    if not 0 <= args.index < manifest.packet_count:
        raise CliError(f"--index outside 0..{manifest.packet_count - 1}")
    frame = store.read_frame(store.frame_path(run_dir, args.view, args.index))
    lines = store.read_records(run_dir, args.stream)
    values = lines[args.index].values

    idx = [int(i) for i in args.xyz.split(",")]
    if len(idx) != 3 or any(i < 0 or i >= len(values) for i in idx):
        raise CliError(f"--xyz must name three components of arity {len(values)}")
    point = [values[i] for i in idx]

    if args.handeye:
        transform = postprocess.RigidTransform.from_dict(_load_json_file(args.handeye))
    else:
        transform = postprocess.RigidTransform.identity()
    if args.intrinsics:
        intr = postprocess.CameraIntrinsics.from_dict(_load_json_file(args.intrinsics))
    else:
        intr = postprocess.CameraIntrinsics(
            fx=args.fx, fy=args.fy,
            cx=args.cx if args.cx is not None else frame.width / 2.0,
            cy=args.cy if args.cy is not None else frame.height / 2.0,
        )

    cam_point = transform.apply(point)
    try:
        u, v = postprocess.project_point(cam_point, intr)
    except postprocess.BehindCameraError as exc:
        raise CliError(str(exc))
    print(f"packet {args.index}: pixel ({u:.2f}, {v:.2f})")

    if args.save:
        gray = postprocess.to_grayscale(frame)
        heat = postprocess.gaussian_heatmap(
            (frame.height, frame.width),
            (u, v),
            postprocess.HeatmapParams(args.sigma[0], args.sigma[1]),
        )
        att = postprocess.attention_image(gray, heat)
        from .streams import ImageFrame

        out_frame = ImageFrame(
            width=frame.width,
            height=frame.height,
            channels=1,
            data=att[:, :, np.newaxis],
        )
        save_path = Path(args.save)
        if save_path.is_dir():
            save_path = save_path / f"attention_{args.index:06d}.png"
        store.save_frame_png(out_frame, save_path)
        print(f"attention image -> {save_path}")
    return 0


def _load_array(path: Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    if path.suffix == ".png":
        return store.read_frame(path).data[:, :, 0].astype(np.float64)
    raise CliError(f"{path}: expected a .npy or .png input")


def cmd_depth(args) -> int:
    disparity = _load_array(args.disparity)
    if args.stereo:
        stereo = postprocess.StereoParams.from_dict(_load_json_file(args.stereo))
    elif args.focal_px is not None and args.baseline_m is not None:
        stereo = postprocess.StereoParams(args.focal_px, args.baseline_m)
    else:
        raise CliError("give --stereo FILE or both --focal-px and --baseline-m")
    depth = postprocess.disparity_to_depth(disparity, stereo)
    np.save(args.out, depth)
    valid = np.isfinite(depth)
    frac = float(valid.mean()) if depth.size else 0.0
    if valid.any():
        print(f"depth -> {args.out} ({frac:.1%} valid, "
              f"range {np.nanmin(depth):.4f}..{np.nanmax(depth):.4f} m)")
    else:
        print(f"depth -> {args.out} (no valid pixels)")
    return 0


def cmd_sharpness(args) -> int:
    run_dir = _resolve_target(args.run_dir, args.run, "run directory")
    manifest = store.load_manifest(run_dir)
    view = args.view
    if view is None:
        images = manifest.image_streams()
        if not images:
            raise CliError("run has no image streams")
        view = images[0].label
    indices = [args.index] if args.index is not None else range(manifest.packet_count)
    for i in indices:
        frame = store.read_frame(store.frame_path(run_dir, view, i))
        score = postprocess.laplacian_variance(postprocess.to_grayscale(frame))
        print(f"{i:06d} {score:.4f}")
    return 0


def cmd_flow_filter(args) -> int:
    flow = _load_array(args.flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise CliError(f"{args.flow}: expected an (h, w, 2) array")
    filtered = postprocess.flow_magnitude_filter(flow, args.tau)
    np.save(args.out, filtered)
    before = int(np.count_nonzero(postprocess.flow_magnitude(flow)))
    after = int(np.count_nonzero(postprocess.flow_magnitude(filtered)))
    print(f"filtered flow -> {args.out} ({before - after} vectors zeroed)")
    return 0


def cmd_contact_eval(args) -> int:
    run_dir = _resolve_target(args.run_dir, args.run, "run directory")
    stream = args.stream
    if stream is None:
        manifest = store.load_manifest(run_dir)
        latched = [
            d for d in manifest.streams if d.kind == StreamKind.LATCHED_NUMERIC
        ]
        if not latched:
            raise CliError("run has no latched streams; name one with --stream")
        stream = latched[0].stream_id
    lines = store.read_records(run_dir, stream)
    if not lines:
        raise CliError(f"stream {stream!r} has no records")
    if args.component >= len(lines[0].values):
        raise CliError(f"--component outside arity {len(lines[0].values)}")
    raw = [ln.values[args.component] for ln in lines]
    cfg = postprocess.ContactConfig(threshold=args.threshold, hysteresis=args.hysteresis)
    states = postprocess.binarize_contact(raw, cfg)
    transitions = postprocess.count_transitions(states)
    in_contact = sum(states)
    print(f"{len(states)} samples, {in_contact} in contact, {transitions} transitions")
    if args.truth_stream:
        truth_lines = store.read_records(run_dir, args.truth_stream)
        truth = [ln.values[0] >= 0.5 for ln in truth_lines]
        acc = postprocess.contact_accuracy(states, truth)
        print(f"accuracy vs {args.truth_stream}: {acc:.4f}")
    return 0


def cmd_serve(args) -> int:
    from . import service

    data_root = Path(args.data_root or os.environ.get("SURGSYNC_OUT") or DEFAULT_OUT)
    ui_dir = Path(args.ui) if args.ui else None
    print(f"serving {data_root} on http://{args.host}:{args.port}")
    service.serve(data_root, host=args.host, port=args.port, ui_dir=ui_dir)
    return 0


# --- parser -----------------------------------------------------------------


def _add_source_args(p) -> None:
    p.add_argument("--streams", help="JSON file with synthetic stream configs")
    p.add_argument("--seed", type=int, default=None,
                   help="base seed; per-stream seeds are derived from it")
    p.add_argument("--duration-s", "--duration", dest="duration", type=float,
                   default=10.0, help="session length in seconds (default 10)")
    p.add_argument("--out", help="output root (default $SURGSYNC_OUT or ./data)")
    p.add_argument("--run-id", help="fixed run id instead of a random one")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surgsync", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("record-online", help="tolerance-gated synchronized recording")
    _add_source_args(p)
    p.add_argument("--reference", help="reference image stream id")
    p.add_argument("--tolerance-ms", type=float, default=online.DEFAULT_TOLERANCE_MS)
    p.add_argument("--queue-cap", type=int, default=online.DEFAULT_QUEUE_CAPACITY,
                   help="bound on the matched-packet queue")
    p.add_argument("--writers", type=int, default=online.DEFAULT_WRITER_POOL_SIZE)
    p.add_argument("--tee-raw", action="store_true",
                   help="also keep verbatim per-stream logs under raw/")
    p.add_argument("--realtime", action="store_true",
                   help="pace samples on the wall clock; press q to stop")
    p.add_argument("--speed", type=float, default=1.0,
                   help="realtime pacing multiplier")
    p.set_defaults(func=cmd_record_online)

    p = sub.add_parser("record-offline", help="fixed-rate capture (stage one)")
    _add_source_args(p)
    p.add_argument("--fps", type=float, default=10.0)
    p.add_argument("--match", action="store_true",
                   help="run matching right after the capture")
    p.add_argument("--reference", help="reference view for --match")
    p.add_argument("--method", choices=("nearest", "linear"), default="nearest")
    p.set_defaults(func=cmd_record_offline)

    p = sub.add_parser("match", help="match a raw capture onto its reference view")
    p.add_argument("raw_dir", nargs="?")
    p.add_argument("--run", help="raw capture directory (same as the positional)")
    p.add_argument("--reference", required=True, help="reference view label")
    p.add_argument("--rule", "--method", dest="method",
                   choices=("nearest", "linear"), default="nearest")
    p.add_argument("--out")
    p.add_argument("--run-id")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("analyze-latency", help="per-stream timing offsets of a run")
    p.add_argument("run_dir", nargs="?")
    p.add_argument("--run", help="run directory (same as the positional)")
    p.add_argument("--reference", help="exclude this stream as the reference")
    p.add_argument("--histogram-bin-ms", "--bin-ms", dest="bin_ms", type=float,
                   default=analysis.DEFAULT_BIN_MS)
    p.add_argument("--json", action="store_true", help="print the report document")
    p.add_argument("--out", help="write the report document to this file")
    p.set_defaults(func=cmd_analyze_latency)

    p = sub.add_parser("validate", help="check a run directory for inconsistencies")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("reproject", help="project a kinematic point into a frame")
    p.add_argument("run_dir", nargs="?")
    p.add_argument("--run", help="run directory (same as the positional)")
    p.add_argument("--view", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--xyz", default="0,1,2",
                   help="comma-separated component indices of the 3-d point")
    p.add_argument("--handeye", help="JSON file with rotation and translation")
    p.add_argument("--intrinsics", help="JSON file with fx, fy, cx, cy")
    p.add_argument("--fx", type=float, default=500.0)
    p.add_argument("--fy", type=float, default=500.0)
    p.add_argument("--cx", type=float, default=None)
    p.add_argument("--cy", type=float, default=None)
    p.add_argument("--sigma", type=float, nargs=2, default=(8.0, 8.0),
                   metavar=("SX", "SY"), help="heatmap sigmas in px")
    p.add_argument("--out", "--save", dest="save",
                   help="write the attention image here (file or directory)")
    p.set_defaults(func=cmd_reproject)

    p = sub.add_parser("depth", help="disparity map to metric depth")
    p.add_argument("disparity", help=".npy or .png disparity input")
    p.add_argument("--stereo", help="JSON file with focal_px and baseline_m")
    p.add_argument("--focal-px", type=float, default=None)
    p.add_argument("--baseline-m", type=float, default=None)
    p.add_argument("--out", default="depth.npy")
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("sharpness", help="Laplacian-variance focus score per frame")
    p.add_argument("run_dir", nargs="?")
    p.add_argument("--run", help="run directory (same as the positional)")
    p.add_argument("--view", help="view label (default: the run's first view)")
    p.add_argument("--index", type=int, default=None)
    p.set_defaults(func=cmd_sharpness)

    p = sub.add_parser("flow-filter", help="zero out small flow vectors")
    p.add_argument("flow", help=".npy optical flow (h, w, 2)")
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--out", default="flow_filtered.npy")
    p.set_defaults(func=cmd_flow_filter)

    p = sub.add_parser("contact-eval", help="binarize a raw contact channel")
    p.add_argument("run_dir", nargs="?")
    p.add_argument("--run", help="run directory (same as the positional)")
    p.add_argument("--stream", help="contact stream (default: first latched one)")
    p.add_argument("--component", type=int, default=0)
    p.add_argument("--threshold", type=float,
                   default=postprocess.CONTACT_THRESHOLD_DEFAULT)
    p.add_argument("--hysteresis", type=float, default=0.0)
    p.add_argument("--truth-stream", help="stream whose component 0 is ground truth")
    p.set_defaults(func=cmd_contact_eval)

    p = sub.add_parser("serve", help="HTTP API over a directory of runs")
    p.add_argument("--root", "--data-root", dest="data_root",
                   help="directory of runs (default $SURGSYNC_OUT or ./data)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--ui", help="static directory to mount at /ui")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except SystemExit as exc:  # argparse --help and friends
        return int(exc.code or 0)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (
        ValueError,
        OSError,
        KeyError,
        store.StoreError,
        offline.OfflineError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # genuinely unexpected
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
