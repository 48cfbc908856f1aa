"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
Tolerances are fixed here and nowhere else.
"""

import asyncio
import json
import math
import time

import numpy as np
import pytest

from voxcache.cache import CacheFullError, CacheTexture, CpuBlockCache, LoadQueue, process_loads
from voxcache.camera import Camera, look_at_quat
from voxcache.cli import main as cli_main
from voxcache.engine import Engine, EngineConfig
from voxcache.lookup import ResolutionPolicy, build_lookup
from voxcache.net import VoxcacheServer, decode_changeset, decode_frame, encode_changeset
from voxcache.pyramid import ArraySource, BlockData, BlockKey, VolumeMeta, build_levels
from voxcache.render import (
    MeshInstance,
    RenderSettings,
    TransferFunction,
    VolumeInstance,
    render_frame,
)
from voxcache.scene import Scene, SceneNode, TypedValue

from oracles import OracleVolume, ReferenceLRU, raycast_ref
from test_render import SPHERE_TF, lookup_for, orbit_camera, ramp_seam_stats, resident_instance, sphere_volume

B = 8


def report(criterion: str, ok: bool, detail: str = ""):
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}"
    if detail:
        line += f"  [{detail}]"
    print(line, flush=True)
    assert ok, line


class TestCriterion1OracleEquivalence:
    def test_sphere_vs_brute_force_256(self):
        meta, levels, raw = sphere_volume(64)
        vol, tex, _ = resident_instance(meta, levels)
        cam = orbit_camera(0.7, 0.3, dist=2.9, size=256)
        lookup_for(vol, tex, cam)
        assert (vol.lookup.scale == 1.0).all()
        t0 = time.perf_counter()
        fb, _ = render_frame([vol], [], cam, tex, RenderSettings())
        elapsed = time.perf_counter() - t0
        oracle = raycast_ref(
            [OracleVolume("sph", raw, np.eye(4),
                          [p[0] for p in SPHERE_TF], [p[1] for p in SPHERE_TF], 255.0)],
            cam.position, cam.orientation, cam.fov_y, cam.near, cam.far, 256, 256,
        )
        diff = int(np.abs(fb.color.astype(int) - oracle.astype(int)).max())
        report(
            "criterion 1: oracle equivalence (256x256, fully resident)",
            diff <= 2 and elapsed < 10.0,
            f"max channel delta {diff}/255, render {elapsed:.2f}s",
        )


class TestCriterion2SeamFreeness:
    def test_ramp_block_boundary_columns(self):
        b_mean, i_mean = ramp_seam_stats(width=256, height=64)
        delta = abs(b_mean - i_mean)
        report(
            "criterion 2: seam-freeness across block boundaries",
            delta <= 1e-3,
            f"|boundary-interior| column stat = {delta:.2e}",
        )


class TestCriterion3LruOracle:
    def test_100k_trace_identical_evictions(self):
        rng = np.random.default_rng(1234)
        tex = CacheTexture.for_slots(16, B, record_evictions=True)
        ref = ReferenceLRU(tex.n_slots)
        edge = B + 2
        payload = np.zeros((edge, edge, edge), dtype=np.uint8)
        keys = [BlockKey("v", 0, i, 0, 0) for i in range(64)]
        frame = 0
        same_frame_evictions = 0
        for _ in range(100_000):
            if rng.integers(0, 100) < 5:
                frame += 1
            k = keys[int(rng.integers(0, len(keys)))]
            if rng.integers(0, 2) == 0:
                before = len(ref.evicted_log)
                try:
                    tex.upload(BlockData(k, payload), frame)
                    ref.upload(k, frame)
                except CacheFullError:
                    pass
                for victim in ref.evicted_log[before:]:
                    if ref.last_frame.get(victim) == frame:
                        same_frame_evictions += 1
            else:
                tex.mark_used(k, frame)
                ref.mark_used(k, frame)
        ok = tex.eviction_log == ref.evicted_log and same_frame_evictions == 0
        report(
            "criterion 3: LRU eviction sequence matches reference over 1e5 ops",
            ok,
            f"{len(ref.evicted_log)} evictions, {same_frame_evictions} same-frame",
        )


class TestCriterion4FallbackConvergence:
    def test_small_cache_then_sufficient(self):
        n = 48
        meta = VolumeMeta(volume_id="sph", dims=(n, n, n), voxel_type="u8", block_size=B)
        idx = (np.arange(n) + 0.5) / n
        z, y, x = np.meshgrid(idx, idx, idx, indexing="ij")
        r = np.sqrt((x - 0.5) ** 2 + (y - 0.5) ** 2 + (z - 0.5) ** 2)
        raw = np.floor(np.clip(1 - r / 0.75, 0, 1) * 255 + 0.5).astype(np.uint8)
        levels = build_levels(raw, meta)
        src = ArraySource(meta, levels)
        working_set = 6 * 6 * 6  # level-0 blocks
        cam = Camera.looking_at((0.5, 0.5, 3.4), (0.5, 0.5, 0.5), width=96, height=96,
                                near=0.05, far=50.0)
        vol = VolumeInstance(meta=meta, world=np.eye(4),
                             transfer=TransferFunction(SPHERE_TF), source=src)
        cpu = CpuBlockCache(256)
        queue = LoadQueue()
        settings = RenderSettings()

        def run_frames(tex, start, count):
            counts = []
            for i in range(start, start + count):
                grid, _ = build_lookup(meta, vol.world, cam, tex, queue, ResolutionPolicy(), i)
                assert grid.base_level == 0
                vol.lookup = grid
                process_loads(queue, src, cpu, tex, budget=8, frame_id=i)
                fb, stats = render_frame([vol], [], cam, tex, settings, i)
                counts.append(stats.absent_samples)
            return counts, fb

        small = CacheTexture.for_slots(max(working_set // 10, 2), B)
        counts_small, _ = run_frames(small, 0, 30)
        phase1_ok = all(a >= b for a, b in zip(counts_small, counts_small[1:]))
        assert counts_small[-1] > 0, "10% cache must not fit the working set"

        big = CacheTexture.for_slots(working_set + 8, B)
        counts_big, _ = run_frames(big, 100, 200)
        reached = next((i for i, c in enumerate(counts_big) if c == 0), None)
        phase2_ok = reached is not None
        monotone_ok = all(a >= b for a, b in zip(counts_big, counts_big[1:]))

        grid, reqs = build_lookup(meta, vol.world, cam, big, queue, ResolutionPolicy(), 500)
        vol.lookup = grid
        at_desired = bool(grid.present.all() and (grid.scale == 1.0).all()) and not reqs
        fb1, _ = render_frame([vol], [], cam, big, settings, 500)
        fb2, _ = render_frame([vol], [], cam, big, settings, 501)
        identical = bool((fb1.color == fb2.color).all())

        report(
            "criterion 4: fallback under pressure, convergence once capacity suffices",
            phase1_ok and phase2_ok and monotone_ok and at_desired and identical,
            f"10%-cache floor {counts_small[-1]} absents; converged in {reached} frames",
        )


class TestCriterion5MultiVolume:
    def test_two_overlapping_volumes_vs_oracle(self):
        rng = np.random.default_rng(9)
        tf_a = [(0.0, (0.0, 0.0, 0.0, 0.0)), (1.0, (1.0, 0.3, 0.1, 0.7))]
        tf_b = [(0.0, (0.0, 0.0, 0.0, 0.0)), (0.5, (0.1, 0.4, 0.9, 0.4)), (1.0, (0.3, 1.0, 0.6, 0.8))]
        vols = []
        oracle_vols = []
        shift = np.eye(4)
        shift[:3, 3] = (0.35, 0.2, 0.15)
        tex = CacheTexture.for_slots(2 * 64 + 8, B)
        for vid, world, tf, seed in (("va", np.eye(4), tf_a, 3), ("vb", shift, tf_b, 4)):
            meta = VolumeMeta(volume_id=vid, dims=(32, 32, 32), voxel_type="u8", block_size=B)
            raw = rng.integers(0, 256, size=(32, 32, 32), dtype=np.uint8)
            levels = build_levels(raw, meta)
            src = ArraySource(meta, levels)
            for bz in range(4):
                for by in range(4):
                    for bx in range(4):
                        tex.upload(src.read(BlockKey(vid, 0, bx, by, bz)), 0)
            vol = VolumeInstance(meta=meta, world=world, transfer=TransferFunction(tf), source=src)
            vols.append(vol)
            oracle_vols.append(
                OracleVolume(vid, raw, world, [p[0] for p in tf], [p[1] for p in tf], 255.0)
            )
        cam = Camera.looking_at((0.7, 0.6, 3.6), (0.7, 0.6, 0.6), width=128, height=128,
                                near=0.05, far=60.0)
        for vol in vols:
            queue = LoadQueue()
            grid, reqs = build_lookup(vol.meta, vol.world, cam, tex, queue, ResolutionPolicy(), 1)
            assert reqs == []
            vol.lookup = grid
        fb, _ = render_frame(vols, [], cam, tex, RenderSettings())
        oracle = raycast_ref(oracle_vols, cam.position, cam.orientation, cam.fov_y,
                             cam.near, cam.far, 128, 128)
        diff = int(np.abs(fb.color.astype(int) - oracle.astype(int)).max())
        report(
            "criterion 5: overlapping multi-volume compositing matches oracle",
            diff <= 2,
            f"max channel delta {diff}/255",
        )


class TestCriterion6MeshOcclusion:
    def test_opaque_quad_bisects_volume(self):
        meta, levels, _ = sphere_volume(32)
        vol, tex, _ = resident_instance(meta, levels)
        cam = Camera.looking_at((0.5, 0.5, 3.0), (0.5, 0.5, 0.5), width=96, height=96,
                                near=0.05, far=50.0)
        lookup_for(vol, tex, cam)
        settings = RenderSettings()
        quad = MeshInstance(
            positions=[[-40.0, -40.0, 1.5], [0.5, -40.0, 1.5], [0.5, 40.0, 1.5], [-40.0, 40.0, 1.5]],
            indices=[[0, 1, 2], [0, 2, 3]],
            world=np.eye(4),
        )
        occluded, _ = render_frame([vol], [quad], cam, tex, settings)
        free, _ = render_frame([vol], [], cam, tex, settings)
        bg = np.floor(np.asarray(settings.background) * 255 + 0.5).astype(np.uint8)
        left = occluded.color[:, :45]
        ok = (left == bg).all() and (free.color[:, :45] != bg).any()
        ok = ok and (occluded.color[:, 51:] == free.color[:, 51:]).all()
        report(
            "criterion 6: geometry depth terminates rays exactly",
            bool(ok),
            "occluded half bit-equals background",
        )


class TestCriterion7Replication:
    def test_1000_mutations_two_clients_over_transport(self):
        rng = np.random.default_rng(77)
        tags = ["Int32", "Int64", "Float32", "Vec3F", "Bool", "String"]

        def random_value():
            tag = tags[int(rng.integers(0, len(tags)))]
            return TypedValue(tag, {
                "Int32": lambda: int(rng.integers(-1000, 1000)),
                "Int64": lambda: int(rng.integers(-(2**40), 2**40)),
                "Float32": lambda: float(np.float32(rng.normal())),
                "Vec3F": lambda: tuple(float(v) for v in rng.normal(size=3)),
                "Bool": lambda: bool(rng.integers(0, 2)),
                "String": lambda: "s" + str(int(rng.integers(0, 99))),
            }[tag]())

        mutations_done = 0

        def mutate(frame_id, engine):
            nonlocal mutations_done
            if mutations_done >= 1000 or frame_id % 8 == 7:  # quiescent tick
                return
            for _ in range(25):
                if mutations_done >= 1000:
                    break
                nid = int(rng.integers(10, 15))
                engine.scene.nodes.setdefault(nid, SceneNode(id=nid))
                engine.scene.set_property(nid, f"p{int(rng.integers(0, 5))}", random_value())
                mutations_done += 1

        scene = Scene()
        node = SceneNode(id=1, kind="volume")
        node.payload["volume"] = {
            "procedural": {"field": "ramp-x", "dims": [16, 16, 16], "volumeId": "r"},
            "inMemory": True,
        }
        scene.nodes[1] = node
        engine = Engine(scene, config=EngineConfig(width=24, height=24))

        async def run():
            from websockets.asyncio.client import connect as ws_connect

            server = VoxcacheServer(engine, port=0, tick_rate=120.0, on_tick=mutate)
            task = asyncio.create_task(server.run())
            while server.bound_port is None:
                if task.done():
                    task.result()
                await asyncio.sleep(0.005)
            url = f"ws://127.0.0.1:{server.bound_port}"

            replicas = [Scene(), Scene()]
            shipped = [0, 0]
            entry_bytes = [0, 0]

            async def client(i):
                ws = await ws_connect(url, max_size=None)
                await ws.send(json.dumps({"type": "hello", "wantsFrames": False, "wantsStats": False}))
                try:
                    async for msg in ws:
                        if isinstance(msg, bytes) and msg[:4] == b"SCCS":
                            shipped[i] += len(msg)
                            entries = decode_changeset(msg)
                            for e in entries:
                                entry_bytes[i] += len(encode_changeset([e])) - 9
                            replicas[i].apply_changeset(entries)
                except Exception:
                    pass

            tasks = [asyncio.create_task(client(i)) for i in range(2)]
            while mutations_done < 1000:
                await asyncio.sleep(0.02)
            # quiescent tail: let the final collect_changes flush and deliver
            await asyncio.sleep(6 / 120.0 + 0.25)
            master_state = engine.scene.canonical_state()
            converged = [replicas[i].canonical_state() == master_state for i in range(2)]
            server.request_stop()
            await asyncio.wait_for(task, 10)
            for t in tasks:
                t.cancel()
            return converged, list(shipped), list(entry_bytes)

        converged, shipped, entry_bytes = asyncio.run(run())
        minimal = all(s < 1.1 * e for s, e in zip(shipped, entry_bytes))
        report(
            "criterion 7: replication converges with near-minimal bytes",
            all(converged) and len(converged) == 2 and minimal and mutations_done == 1000,
            f"shipped {shipped} vs entry bytes {entry_bytes}",
        )


class TestCriterion8BoundedMemory:
    def test_virtual_2048_orbit_within_512mib(self, tmp_path, capsys):
        scene = [
            {
                "id": 1,
                "kind": "volume",
                "volume": {
                    "procedural": {"field": "shells", "dims": [2048, 2048, 2048],
                                   "volumeId": "tera", "blockSize": 32},
                    "transferFunction": [[0.0, 0, 0, 0, 0.0], [1.0, 1, 1, 1, 0.7]],
                },
            }
        ]
        scene_path = tmp_path / "tera.json"
        scene_path.write_text(json.dumps(scene))
        frames = []
        center = np.array([0.5, 0.5, 0.5])
        for i in range(8):
            ang = 2 * math.pi * i / 8
            eye = center + 2.6 * np.array([math.sin(ang), 0.3, math.cos(ang)])
            frames.append({"time": float(i), "pos": eye.tolist(),
                           "quat": [float(q) for q in look_at_quat(eye, center)], "fovY": 0.9})
        path = tmp_path / "orbit.json"
        path.write_text(json.dumps(frames))
        code = cli_main([
            "bench", str(scene_path), "--camera-path", str(path), "--frames", "10",
            "--budget-mib", "512", "--size", "64x64",
            "--cache-slots", "512", "--cpu-cache-blocks", "512", "--load-budget", "64",
        ])
        out = capsys.readouterr().out
        data = json.loads(out)
        peak_mib = data["peakResidentBytes"] / (1024 * 1024)
        report(
            "criterion 8: 2048^3 virtual volume orbits within 512 MiB",
            code == 0 and data["withinBudget"],
            f"peak resident {peak_mib:.1f} MiB",
        )


class TestCriterion9StreamingIntegration:
    def test_camera_response_ordering_and_stall_tolerance(self):
        scene = Scene()
        node = SceneNode(id=1, kind="volume")
        node.payload["volume"] = {
            "procedural": {"field": "shells", "dims": [64, 64, 64],
                           "volumeId": "s", "blockSize": 8},
            "transferFunction": [[0.0, 0, 0, 0, 0.0], [1.0, 1, 1, 1, 0.8]],
        }
        scene.nodes[1] = node
        engine = Engine(scene, config=EngineConfig(width=64, height=64, cache_slots=600,
                                                   load_budget=32))
        tick_rate = 20.0

        async def run():
            from websockets.asyncio.client import connect as ws_connect

            server = VoxcacheServer(engine, port=0, tick_rate=tick_rate)
            task = asyncio.create_task(server.run())
            while server.bound_port is None:
                if task.done():
                    task.result()
                await asyncio.sleep(0.005)
            url = f"ws://127.0.0.1:{server.bound_port}"

            ws = await ws_connect(url, max_size=None)
            await ws.send(json.dumps({"type": "hello", "wantsFrames": True, "wantsStats": False}))

            ids = []
            first = None
            async for msg in ws:
                if isinstance(msg, bytes) and msg[:4] == b"SCFR":
                    first = decode_frame(msg)
                    ids.append(first.frame_id)
                    break
            # wait until the image stabilizes (cache warm for the static view)
            stable = first
            streak = 0
            async for msg in ws:
                if isinstance(msg, bytes) and msg[:4] == b"SCFR":
                    f = decode_frame(msg)
                    ids.append(f.frame_id)
                    streak = streak + 1 if f.payload == stable.payload else 0
                    stable = f
                    if streak >= 3:
                        break

            cam = engine.camera
            sent_after = stable.frame_id
            await ws.send(json.dumps({
                "type": "camera",
                "pos": [float(cam.position[0] + 0.6), float(cam.position[1] + 0.3),
                        float(cam.position[2])],
                "quat": [float(q) for q in cam.orientation],
                "fovY": cam.fov_y,
            }))
            changed_frame = None
            async for msg in ws:
                if isinstance(msg, bytes) and msg[:4] == b"SCFR":
                    f = decode_frame(msg)
                    ids.append(f.frame_id)
                    if f.payload != stable.payload:
                        changed_frame = f.frame_id
                        break
                    if f.frame_id > sent_after + 6:
                        break
            within_two_ticks = changed_frame is not None and changed_frame <= sent_after + 2
            strictly_increasing = all(a < b for a, b in zip(ids, ids[1:]))

            # cadence without the stalled client
            t0 = server.ticks_done
            await asyncio.sleep(1.0)
            solo_rate = server.ticks_done - t0

            stalled = await ws_connect(url, max_size=None, max_queue=1)
            await stalled.send(json.dumps({"type": "hello", "wantsFrames": True,
                                           "wantsStats": False}))
            await asyncio.sleep(0.3)  # let its queue saturate
            t1 = server.ticks_done
            await asyncio.sleep(1.0)
            stalled_rate = server.ticks_done - t1

            dropped = sum(q.dropped for _, q in server._sessions.values())
            try:
                await asyncio.wait_for(ws.close(), 3)
                await asyncio.wait_for(stalled.close(), 3)
            except Exception:
                pass
            server.request_stop()
            await asyncio.wait_for(task, 20)
            return within_two_ticks, strictly_increasing, solo_rate, stalled_rate, dropped

        within_two, increasing, solo, stalled_r, dropped = asyncio.run(run())
        cadence_ok = stalled_r >= 0.9 * solo
        report(
            "criterion 9: streaming integration (response, ordering, stall tolerance)",
            within_two and increasing and cadence_ok,
            f"solo {solo} vs stalled {stalled_r} ticks/s, dropped {dropped} frames",
        )
