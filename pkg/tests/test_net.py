import asyncio
import json
import struct

import numpy as np
import pytest

from voxcache.engine import Engine, EngineConfig
from voxcache.net import (
    DecodeError,
    FrameMessage,
    VoxcacheServer,
    _ClientQueue,
    decode_changeset,
    decode_frame,
    encode_changeset,
    encode_frame,
)
from voxcache.render import FrameBuffer
from voxcache.scene import ChangeEntry, Scene, SceneNode, TypedValue


def fb_from_pixels(pixels) -> FrameBuffer:
    arr = np.asarray(pixels, dtype=np.uint8)
    return FrameBuffer(color=arr, depth=np.zeros(arr.shape[:2]))


class TestFrameCodec:
    def test_golden_bytes(self, fixtures_dir):
        fb = fb_from_pixels([[[255, 0, 0, 255], [0, 255, 0, 255]]])  # 2x1
        assert encode_frame(fb, 7) == (fixtures_dir / "frame_2x1.bin").read_bytes()

    def test_golden_decodes(self, fixtures_dir):
        msg = decode_frame((fixtures_dir / "frame_2x1.bin").read_bytes())
        assert (msg.frame_id, msg.width, msg.height, msg.format) == (7, 2, 1, 0)
        np.testing.assert_array_equal(
            msg.to_array(), [[[255, 0, 0, 255], [0, 255, 0, 255]]]
        )

    def test_round_trip_random_frames(self, rng):
        for _ in range(20):
            w, h = int(rng.integers(1, 40)), int(rng.integers(1, 40))
            fb = fb_from_pixels(rng.integers(0, 256, size=(h, w, 4), dtype=np.uint8))
            fid = int(rng.integers(0, 2**63))
            msg = decode_frame(encode_frame(fb, fid))
            assert (msg.frame_id, msg.width, msg.height) == (fid, w, h)
            np.testing.assert_array_equal(msg.to_array(), fb.color)

    def test_bad_magic(self, fixtures_dir):
        data = bytearray((fixtures_dir / "frame_2x1.bin").read_bytes())
        data[0] = ord("X")
        with pytest.raises(DecodeError, match="magic"):
            decode_frame(bytes(data))

    def test_bad_version(self, fixtures_dir):
        data = bytearray((fixtures_dir / "frame_2x1.bin").read_bytes())
        data[4] = 9
        with pytest.raises(DecodeError, match="protocolVersion"):
            decode_frame(bytes(data))

    def test_truncated_payload(self, fixtures_dir):
        data = (fixtures_dir / "frame_2x1.bin").read_bytes()
        with pytest.raises(DecodeError, match="payloadLength mismatch"):
            decode_frame(data[:-3])

    def test_oversized_dims_rejected(self):
        fb = fb_from_pixels(np.zeros((1, 1, 4), dtype=np.uint8))
        fb.color = np.zeros((1, 70000, 4), dtype=np.uint8)
        with pytest.raises(ValueError):
            encode_frame(fb, 0)


class TestChangesetCodec:
    def test_empty_changeset_layout(self):
        data = encode_changeset([])
        assert data == b"SCCS" + bytes([1]) + struct.pack("<I", 0)
        assert decode_changeset(data) == []

    def test_single_int32_golden(self, fixtures_dir):
        cs = [ChangeEntry(42, "level", TypedValue("Int32", 7))]
        assert encode_changeset(cs) == (fixtures_dir / "changeset_int32.bin").read_bytes()
        back = decode_changeset(encode_changeset(cs))
        assert back[0].node_id == 42 and back[0].name == "level"
        assert back[0].value == TypedValue("Int32", 7)

    def test_round_trip_randomized(self, rng):
        tags = ["Int32", "Int64", "Float32", "Vec3F", "Vec4F", "Bool", "String"]
        for _ in range(25):
            entries = []
            for _ in range(int(rng.integers(0, 8))):
                tag = tags[int(rng.integers(0, len(tags)))]
                value = {
                    "Int32": lambda: int(rng.integers(-(2**31), 2**31)),
                    "Int64": lambda: int(rng.integers(-(2**62), 2**62)),
                    "Float32": lambda: float(np.float32(rng.normal())),
                    "Vec3F": lambda: tuple(float(x) for x in rng.normal(size=3)),
                    "Vec4F": lambda: tuple(float(x) for x in rng.normal(size=4)),
                    "Bool": lambda: bool(rng.integers(0, 2)),
                    "String": lambda: "s" * int(rng.integers(0, 10)),
                }[tag]()
                entries.append(
                    ChangeEntry(int(rng.integers(0, 2**63)), f"p{rng.integers(0, 9)}", TypedValue(tag, value))
                )
            back = decode_changeset(encode_changeset(entries))
            assert len(back) == len(entries)
            for a, b in zip(entries, back):
                assert (a.node_id, a.name, a.value) == (b.node_id, b.name, b.value)

    def test_malformed_entry_names_index(self):
        cs = [ChangeEntry(1, "ok", TypedValue("Int32", 1))]
        data = bytearray(encode_changeset(cs))
        data[4 + 1 + 4 + 8 + 2 + 2] = 99  # corrupt the type tag of entry 0
        with pytest.raises(DecodeError, match="entry 0"):
            decode_changeset(bytes(data))

    def test_trailing_bytes_rejected(self):
        data = encode_changeset([]) + b"x"
        with pytest.raises(DecodeError, match="trailing"):
            decode_changeset(data)

    def test_bad_magic(self):
        with pytest.raises(DecodeError, match="magic"):
            decode_changeset(b"XXXX" + bytes(5))


class TestClientQueue:
    def test_drop_oldest_frame_policy(self):
        q = _ClientQueue(max_frames=2)
        q.push(b"f1", is_frame=True)
        q.push(b"c1", is_frame=False)
        q.push(b"f2", is_frame=True)
        q.push(b"f3", is_frame=True)  # drops f1
        assert q.dropped == 1
        items = [item for item, _ in q.items]
        assert items == [b"c1", b"f2", b"f3"]

    def test_control_messages_never_dropped(self):
        q = _ClientQueue(max_frames=1)
        for i in range(5):
            q.push(f"c{i}".encode(), is_frame=False)
        q.push(b"f1", is_frame=True)
        q.push(b"f2", is_frame=True)
        items = [item for item, _ in q.items]
        assert items == [b"c0", b"c1", b"c2", b"c3", b"c4", b"f2"]


def in_memory_scene() -> Scene:
    scene = Scene()
    node = SceneNode(id=1, kind="volume")
    node.payload["volume"] = {
        "procedural": {"field": "ramp-x", "dims": [16, 16, 16], "volumeId": "ramp"},
        "inMemory": True,
        "transferFunction": [[0.0, 0, 0, 0, 0.0], [1.0, 1, 1, 1, 0.9]],
    }
    scene.nodes[1] = node
    return scene


def make_engine(width=48, height=48) -> Engine:
    return Engine(in_memory_scene(), config=EngineConfig(width=width, height=height))


def run_with_server(client_coro, engine=None, tick_rate=60.0, on_tick=None, timeout=20.0):
    """Start a server on an ephemeral port, run the client coroutine, shut down."""

    async def main():
        server = VoxcacheServer(engine or make_engine(), port=0, tick_rate=tick_rate, on_tick=on_tick)
        task = asyncio.create_task(server.run())
        try:
            while server.bound_port is None:
                if task.done():
                    task.result()
                await asyncio.sleep(0.005)
            return await asyncio.wait_for(client_coro(server), timeout)
        finally:
            server.request_stop()
            await asyncio.wait_for(task, 10)

    return asyncio.run(main())


async def connect(server):
    from websockets.asyncio.client import connect as ws_connect

    return await ws_connect(f"ws://127.0.0.1:{server.bound_port}", max_size=None)


HELLO = json.dumps({"type": "hello", "wantsFrames": True, "wantsStats": True})


class TestServerIntegration:
    def test_frames_stream_with_increasing_ids(self):
        async def client(server):
            ws = await connect(server)
            await ws.send(HELLO)
            ids = []
            async for msg in ws:
                if isinstance(msg, bytes) and msg[:4] == b"SCFR":
                    frame = decode_frame(msg)
                    ids.append(frame.frame_id)
                    assert frame.width == 48 and frame.height == 48
                    if len(ids) >= 5:
                        break
            await ws.close()
            assert ids == sorted(ids) and len(set(ids)) == len(ids)

        run_with_server(client)

    def test_camera_message_changes_frames(self):
        async def client(server):
            ws = await connect(server)
            await ws.send(HELLO)
            first = None
            async for msg in ws:
                if isinstance(msg, bytes) and msg[:4] == b"SCFR":
                    first = decode_frame(msg)
                    break
            cam = server.engine.camera
            move = {
                "type": "camera",
                "pos": [float(cam.position[0] + 0.8), float(cam.position[1] + 0.4),
                        float(cam.position[2] - 0.5)],
                "quat": [float(q) for q in cam.orientation],
                "fovY": cam.fov_y,
            }
            await ws.send(json.dumps(move))
            changed_at = None
            async for msg in ws:
                if isinstance(msg, bytes) and msg[:4] == b"SCFR":
                    frame = decode_frame(msg)
                    if frame.payload != first.payload:
                        changed_at = frame.frame_id
                        break
                    assert frame.frame_id < first.frame_id + 30, "frame never changed"
            await ws.close()
            assert changed_at is not None

        run_with_server(client)

    def test_stats_messages_arrive(self):
        async def client(server):
            ws = await connect(server)
            await ws.send(HELLO)
            async for msg in ws:
                if isinstance(msg, str):
                    stats = json.loads(msg)
                    if stats.get("type") == "stats":
                        assert "residentSlots" in stats and "absentSamples" in stats
                        assert "pendingLoads" in stats and "fps" in stats
                        break
            await ws.close()

        run_with_server(client)

    def test_changeset_broadcast_converges_replica(self):
        def mutate(frame_id, engine):
            if frame_id < 10:
                engine.scene.nodes.setdefault(5, SceneNode(id=5))
                engine.scene.set_property(5, "tick", TypedValue("Int64", frame_id))
                engine.scene.set_property(5, "phase", TypedValue("Float32", frame_id * 0.25))

        async def client(server):
            ws = await connect(server)
            await ws.send(HELLO)
            replica = Scene()
            async for msg in ws:
                if isinstance(msg, bytes) and msg[:4] == b"SCCS":
                    replica.apply_changeset(decode_changeset(msg))
                if isinstance(msg, bytes) and msg[:4] == b"SCFR":
                    if decode_frame(msg).frame_id > 12:
                        break
            await ws.close()
            assert replica.canonical_state() == server.engine.scene.canonical_state()
            assert replica.nodes[5].properties.get("tick").value == 9

        run_with_server(client, on_tick=mutate)

    def test_unknown_control_type_ignored(self):
        async def client(server):
            ws = await connect(server)
            await ws.send(json.dumps({"type": "mystery", "x": 1}))
            await ws.send(HELLO)
            async for msg in ws:
                if isinstance(msg, bytes) and msg[:4] == b"SCFR":
                    break  # still serving: the unknown type did not kill the session
            await ws.close()

        run_with_server(client)

    def test_client_disconnect_keeps_server_alive(self):
        async def client(server):
            ws1 = await connect(server)
            await ws1.send(HELLO)
            async for msg in ws1:
                if isinstance(msg, bytes) and msg[:4] == b"SCFR":
                    break
            await ws1.close()
            ws2 = await connect(server)
            await ws2.send(HELLO)
            async for msg in ws2:
                if isinstance(msg, bytes) and msg[:4] == b"SCFR":
                    break
            await ws2.close()

        run_with_server(client)

    def test_with_ui_serves_static_assets(self, tmp_path):
        ui = tmp_path / "dist"
        ui.mkdir()
        (tmp_path / "dist" / "index.html").write_text("<html>viewer</html>")
        (tmp_path / "dist" / "main.js").write_text("console.log('hi')")

        async def main():
            server = VoxcacheServer(make_engine(), port=0, ui_dir=ui)
            task = asyncio.create_task(server.run())
            while server.bound_port is None:
                if task.done():
                    task.result()
                await asyncio.sleep(0.005)
            import urllib.request

            base = f"http://127.0.0.1:{server.bound_port}"
            loop = asyncio.get_running_loop()

            def get(path):
                with urllib.request.urlopen(base + path) as resp:
                    return resp.status, resp.headers.get("Content-Type"), resp.read()

            status, ctype, body = await loop.run_in_executor(None, get, "/")
            assert status == 200 and ctype == "text/html" and b"viewer" in body
            status, ctype, _ = await loop.run_in_executor(None, get, "/main.js")
            assert status == 200 and ctype == "text/javascript"
            try:
                await loop.run_in_executor(None, get, "/missing.css")
                raise AssertionError("expected 404")
            except Exception as exc:
                assert "404" in str(exc)
            # websocket clients still work alongside static serving
            ws = await connect(server)
            await ws.send(HELLO)
            async for msg in ws:
                if isinstance(msg, bytes) and msg[:4] == b"SCFR":
                    break
            await ws.close()
            server.request_stop()
            await asyncio.wait_for(task, 10)

        asyncio.run(main())

    def test_bind_failure_raises(self):
        import socket

        from voxcache.net import BindError

        sock = socket.socket()
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]
        sock.listen(1)

        async def main():
            server = VoxcacheServer(make_engine(), port=port)
            with pytest.raises(BindError):
                await server.run()

        try:
            asyncio.run(main())
        finally:
            sock.close()
