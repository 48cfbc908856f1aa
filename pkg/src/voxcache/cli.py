"""Command-line driver: ingestion, offline rendering, serving, inspection, benchmarks.

Exit codes: 0 success, 2 bad input data, 3 I/O failure, 4 bind failure,
5 budget exceeded. Reports go to stdout, logs to stderr (level from the
``VOXCACHE_LOG`` environment variable).
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import math
import os
import signal
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera, quat_normalize
from .cache import CacheTexture, LoadQueue
from .engine import Engine, EngineConfig, engine_from_file
from .lookup import ResolutionPolicy, build_lookup
from .net import BindError, serve_scene
from .pyramid import FilePyramid, VolumeMeta, build_pyramid, VOXEL_DTYPES
from .render import RenderSettings, write_png

log = logging.getLogger("voxcache")

EXIT_OK = 0
EXIT_DATA = 2
EXIT_IO = 3
EXIT_BIND = 4
EXIT_BUDGET = 5


@dataclass
class Keyframe:
    time: float
    pos: np.ndarray
    quat: np.ndarray
    fov_y: float


class CameraPath:
    """Keyframed camera: linear position, normalized-linear quaternion blending."""

    def __init__(self, keyframes: list[Keyframe]):
        if not keyframes:
            raise ValueError("camera path needs at least one keyframe")
        times = [k.time for k in keyframes]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("keyframe times must be strictly increasing")
        for k in keyframes:
            k.quat = quat_normalize(k.quat)  # rejects zero quaternions
        self.keyframes = keyframes

    @classmethod
    def load(cls, path) -> "CameraPath":
        doc = json.loads(Path(path).read_text())
        frames = [
            Keyframe(
                time=float(k["time"]),
                pos=np.asarray(k["pos"], dtype=np.float64),
                quat=np.asarray(k["quat"], dtype=np.float64),
                fov_y=float(k.get("fovY", math.radians(50.0))),
            )
            for k in doc
        ]
        return cls(frames)

    @property
    def t_begin(self) -> float:
        return self.keyframes[0].time

    @property
    def t_end(self) -> float:
        return self.keyframes[-1].time

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray, float]:
        ks = self.keyframes
        if t <= ks[0].time or len(ks) == 1:
            k = ks[0]
            return k.pos, k.quat, k.fov_y
        if t >= ks[-1].time:
            k = ks[-1]
            return k.pos, k.quat, k.fov_y
        hi = next(i for i, k in enumerate(ks) if k.time > t)
        a, b = ks[hi - 1], ks[hi]
        u = (t - a.time) / (b.time - a.time)
        pos = (1 - u) * a.pos + u * b.pos
        qb = b.quat if float(a.quat @ b.quat) >= 0 else -b.quat
        quat = quat_normalize((1 - u) * a.quat + u * qb)
        return pos, quat, (1 - u) * a.fov_y + u * b.fov_y


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad size {text!r}, want WxH") from exc


def _parse_triple(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"bad triple {text!r}, want X,Y,Z")
    return tuple(int(p) for p in parts)


def _engine_config(args) -> EngineConfig:
    w, h = args.size
    return EngineConfig(
        cache_slots=args.cache_slots,
        cpu_cache_blocks=args.cpu_cache_blocks,
        load_budget=args.load_budget,
        loader_workers=args.loader_workers,
        width=w,
        height=h,
    )


def _camera_for_frame(path: CameraPath | None, engine: Engine, t: float) -> Camera:
    base = engine.camera
    if path is None:
        return base
    pos, quat, fov = path.at(t)
    return Camera(
        position=pos, orientation=quat, fov_y=fov,
        near=base.near, far=base.far, width=base.width, height=base.height,
    )


def cmd_build(args) -> int:
    dims = args.dims
    dtype = VOXEL_DTYPES[args.type]
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    try:
        actual = os.path.getsize(args.input)
    except OSError as exc:
        print(f"error: cannot stat input: {exc}", file=sys.stderr)
        return EXIT_IO
    if actual != expected:
        print(
            f"error: input holds {actual} bytes, dims {dims} with type {args.type} "
            f"need {expected}",
            file=sys.stderr,
        )
        return EXIT_DATA
    try:
        raw = np.fromfile(args.input, dtype=dtype).reshape(dims[2], dims[1], dims[0])
        meta = VolumeMeta(
            volume_id=args.volume_id,
            dims=dims,
            voxel_type=args.type,
            voxel_size=tuple(float(v) for v in args.voxel_size.split(",")),
            block_size=args.block_size,
        )
        pyramid = build_pyramid(raw, meta, args.out)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"pyramid {meta.volume_id} -> {args.out}")
    print("level  dims                 grid             blocks")
    for lvl in range(meta.num_levels):
        d = meta.level_dims(lvl)
        g = meta.grid_dims(lvl)
        print(f"{lvl:<6} {d[0]}x{d[1]}x{d[2]:<12} {g[0]}x{g[1]}x{g[2]:<10} {g[0]*g[1]*g[2]}")
    _ = pyramid
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        engine = engine_from_file(args.scene, config=_engine_config(args))
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load scene: {exc}", file=sys.stderr)
        return EXIT_DATA
    path = CameraPath.load(args.camera_path) if args.camera_path else None
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    n = args.frames
    times = _frame_times(path, n)
    frames_stats = []
    for i in range(n):
        cam = _camera_for_frame(path, engine, times[i])
        fb, fstats, cstats = engine.step(i, cam)
        write_png(fb, out_dir / f"frame_{i:05d}.png")
        frames_stats.append(
            {
                "frameId": i,
                "absentSamples": fstats.absent_samples,
                "usedBlocks": fstats.used_blocks,
                **cstats.as_dict(),
            }
        )
    (out_dir / "stats.json").write_text(json.dumps({"frames": frames_stats}, indent=2) + "\n")
    print(f"rendered {n} frame(s) to {out_dir}")
    return EXIT_OK


def _frame_times(path: CameraPath | None, n: int) -> list[float]:
    if path is None or n <= 1:
        return [path.t_begin if path else 0.0] * max(n, 1)
    t0, t1 = path.t_begin, path.t_end
    return [t0 + (t1 - t0) * i / (n - 1) for i in range(n)]


def cmd_serve(args) -> int:
    try:
        engine = engine_from_file(args.scene, config=_engine_config(args))
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load scene: {exc}", file=sys.stderr)
        return EXIT_DATA
    ui_dir = args.with_ui if args.with_ui else None
    server = serve_scene(
        engine, port=args.port, tick_rate=args.tick_rate, headless=args.headless, ui_dir=ui_dir
    )

    async def run():
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, server.request_stop)
            except NotImplementedError:
                pass
        await server.run()

    try:
        asyncio.run(run())
    except BindError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BIND
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_info(args) -> int:
    try:
        pyramid = FilePyramid(args.pyramid)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    meta = pyramid.meta
    print(f"volume {meta.volume_id}: dims {meta.dims}, {meta.voxel_type}, "
          f"block {meta.block_size}, {meta.num_levels} level(s)")
    print("level  dims                 grid             blocks")
    for lvl in range(meta.num_levels):
        d = meta.level_dims(lvl)
        g = meta.grid_dims(lvl)
        print(f"{lvl:<6} {d[0]}x{d[1]}x{d[2]:<12} {g[0]}x{g[1]}x{g[2]:<10} {g[0]*g[1]*g[2]}")
    if args.dump_lut:
        # Cold-cache lookup grid from a default framing camera: shows the
        # grid geometry and the request pattern.
        world = np.eye(4)
        cam = Camera.looking_at((0.5, 0.5, 2.5), (0.5, 0.5, 0.5), width=64, height=64)
        tex = CacheTexture.for_slots(8, meta.block_size, meta.dtype)
        queue = LoadQueue()
        grid, _ = build_lookup(meta, world, cam, tex, queue, ResolutionPolicy(), frame_id=0)
        print(grid.dump())
    return EXIT_OK


def cmd_bench(args) -> int:
    budget_bytes = int(args.budget_mib * 1024 * 1024)
    if budget_bytes <= 0:
        print(json.dumps({"error": "budget exhausted before start", "budgetMiB": args.budget_mib}))
        return EXIT_BUDGET
    try:
        engine = engine_from_file(args.scene, config=_engine_config(args))
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load scene: {exc}", file=sys.stderr)
        return EXIT_DATA
    path = CameraPath.load(args.camera_path) if args.camera_path else None
    times = _frame_times(path, args.frames)
    import time as _time

    absent_curve = []
    peak = engine.resident_bytes()
    t0 = _time.perf_counter()
    for i in range(args.frames):
        cam = _camera_for_frame(path, engine, times[i])
        _fb, fstats, _cstats = engine.step(i, cam)
        absent_curve.append(fstats.absent_samples)
        peak = max(peak, engine.resident_bytes())
    elapsed = _time.perf_counter() - t0
    report = {
        "frames": args.frames,
        "fps": args.frames / elapsed if elapsed > 0 else 0.0,
        "peakResidentBytes": peak,
        "budgetMiB": args.budget_mib,
        "withinBudget": peak <= budget_bytes,
        "absentSamples": absent_curve,
    }
    print(json.dumps(report, indent=2))
    if peak > budget_bytes:
        return EXIT_BUDGET
    return EXIT_OK


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cache-slots", type=int, default=512, help="cache texture slot count")
    p.add_argument("--cpu-cache-blocks", type=int, default=512, help="CPU cache capacity in blocks")
    p.add_argument("--load-budget", type=int, default=0,
                   help="blocks uploaded per frame (0 = unlimited)")
    p.add_argument("--loader-workers", type=int, default=0, help="parallel source readers")
    p.add_argument("--size", type=_parse_size, default=(256, 256), help="viewport WxH")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voxcache", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="ingest a raw volume into a block pyramid")
    p.add_argument("input", help="raw voxel file, x-fastest, little-endian")
    p.add_argument("out", help="output pyramid directory")
    p.add_argument("--dims", type=_parse_triple, required=True, help="X,Y,Z voxel dimensions")
    p.add_argument("--type", choices=sorted(VOXEL_DTYPES), default="u8")
    p.add_argument("--block-size", type=int, default=32)
    p.add_argument("--voxel-size", default="1,1,1", help="world units per voxel, X,Y,Z")
    p.add_argument("--volume-id", default="volume")
    p.set_defaults(fn=cmd_build)

    p = sub.add_parser("render", help="render frames along a camera path to PNG files")
    p.add_argument("scene", help="scene JSON file")
    p.add_argument("--camera-path", help="camera keyframe JSON file")
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--out", default="frames")
    _add_engine_flags(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("serve", help="run the headless streaming server")
    p.add_argument("scene")
    p.add_argument("--port", type=int, default=9000)
    p.add_argument("--tick-rate", type=float, default=30.0)
    p.add_argument("--headless", action="store_true", default=True)
    p.add_argument("--with-ui", nargs="?", const="frontend/dist", default=None,
                   help="also serve the browser viewer from this directory")
    _add_engine_flags(p)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("info", help="inspect a pyramid directory")
    p.add_argument("pyramid")
    p.add_argument("--dump-lut", action="store_true", help="dump a cold-cache lookup grid")
    p.set_defaults(fn=cmd_info)

    p = sub.add_parser("bench", help="run a camera path and report memory/throughput")
    p.add_argument("scene")
    p.add_argument("--camera-path")
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--budget-mib", type=float, default=512.0)
    _add_engine_flags(p)
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("VOXCACHE_LOG", "WARNING").upper(),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
