"""Wire protocol and headless streaming server.

Transport: one WebSocket per client carrying binary frame/changeset messages
plus JSON text control messages, so a browser can speak it natively.

Binary layouts (all integers little-endian):

Frame message::

    magic "SCFR" | version u8 (=1) | frameId u64 | width u16 | height u16 |
    format u8 (0 = RGBA8) | payloadLength u32 | payload (row-major, top-left)

Changeset message::

    magic "SCCS" | version u8 (=1) | entryCount u32 | entries*
    entry: nodeId u64 | nameLength u16 | name utf-8 | typeTag u8 |
           valueLength u32 | value bytes (canonical TypedValue form)

Control messages are JSON objects with a "type" field: "hello" (subscribe,
client->server), "camera", "settings" (client->server, last writer per tick
wins), "stats" (server->client), "changeset-ack" (client->server). Unknown
types are ignored with a warning.

The server renders at a fixed tick rate. Frames go through per-client bounded
queues with a drop-oldest-frame policy so one stalled client never slows the
tick loop or corrupts anyone's stream; changesets and stats are never dropped.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import struct
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera
from .engine import Engine
from .render import FrameBuffer
from .scene import ChangeEntry, Changeset, TAG_IDS, TypedValue

log = logging.getLogger(__name__)

FRAME_MAGIC = b"SCFR"
CHANGESET_MAGIC = b"SCCS"
PROTOCOL_VERSION = 1
FORMAT_RGBA8 = 0

_FRAME_HEADER = struct.Struct("<4sBQHHBI")


class DecodeError(ValueError):
    """Malformed wire message; the message names the offending field."""


def encode_frame(fb: FrameBuffer, frame_id: int) -> bytes:
    """Frame buffer to wire bytes; dims must fit u16."""
    h, w = fb.color.shape[0], fb.color.shape[1]
    if w > 0xFFFF or h > 0xFFFF:
        raise ValueError("frame dimensions exceed 65535")
    payload = np.ascontiguousarray(fb.color).tobytes()
    header = _FRAME_HEADER.pack(
        FRAME_MAGIC, PROTOCOL_VERSION, frame_id, w, h, FORMAT_RGBA8, len(payload)
    )
    return header + payload


@dataclass
class FrameMessage:
    frame_id: int
    width: int
    height: int
    format: int
    payload: bytes

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=np.uint8).reshape(self.height, self.width, 4)


def decode_frame(data: bytes) -> FrameMessage:
    if len(data) < _FRAME_HEADER.size:
        raise DecodeError(f"frame header truncated: {len(data)} bytes")
    magic, version, frame_id, w, h, fmt, plen = _FRAME_HEADER.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise DecodeError(f"bad magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise DecodeError(f"unsupported protocolVersion {version}")
    if fmt != FORMAT_RGBA8:
        raise DecodeError(f"unsupported format {fmt}")
    payload = data[_FRAME_HEADER.size :]
    if plen != w * h * 4 or len(payload) != plen:
        raise DecodeError(
            f"payloadLength mismatch: header {plen}, dims want {w * h * 4}, got {len(payload)}"
        )
    return FrameMessage(frame_id, w, h, fmt, payload)


def encode_changeset(changes: Changeset) -> bytes:
    parts = [CHANGESET_MAGIC, bytes([PROTOCOL_VERSION]), struct.pack("<I", len(changes))]
    for entry in changes:
        name = entry.name.encode("utf-8")
        value = entry.value.canonical_bytes()
        parts.append(struct.pack("<QH", entry.node_id, len(name)))
        parts.append(name)
        parts.append(bytes([TAG_IDS[entry.value.tag]]))
        parts.append(struct.pack("<I", len(value)))
        parts.append(value)
    return b"".join(parts)


def decode_changeset(data: bytes) -> Changeset:
    if len(data) < 9:
        raise DecodeError(f"changeset header truncated: {len(data)} bytes")
    if data[:4] != CHANGESET_MAGIC:
        raise DecodeError(f"bad magic {data[:4]!r}")
    if data[4] != PROTOCOL_VERSION:
        raise DecodeError(f"unsupported protocolVersion {data[4]}")
    (count,) = struct.unpack_from("<I", data, 5)
    pos = 9
    out: Changeset = []
    for i in range(count):
        try:
            node_id, name_len = struct.unpack_from("<QH", data, pos)
            pos += 10
            name = data[pos : pos + name_len]
            if len(name) != name_len:
                raise ValueError("name truncated")
            pos += name_len
            tag_id = data[pos]
            pos += 1
            (value_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            raw = data[pos : pos + value_len]
            if len(raw) != value_len:
                raise ValueError("value truncated")
            pos += value_len
            out.append(ChangeEntry(node_id, name.decode("utf-8"), TypedValue.from_bytes(tag_id, raw)))
        except (struct.error, ValueError, IndexError) as exc:
            raise DecodeError(f"malformed changeset entry {i}: {exc}") from exc
    if pos != len(data):
        raise DecodeError(f"changeset has {len(data) - pos} trailing bytes after {count} entries")
    return out


@dataclass
class SessionState:
    client_id: int
    wants_frames: bool = False
    wants_stats: bool = False
    last_ack_frame: int = -1
    dropped_frames: int = 0


class _ClientQueue:
    """Bounded outbound queue: frames beyond the limit drop oldest-first,
    control/changeset messages are never dropped."""

    def __init__(self, max_frames: int = 2):
        self.items: deque[tuple[object, bool]] = deque()
        self.max_frames = max_frames
        self.frames = 0
        self.dropped = 0
        self._ready = asyncio.Event()

    def push(self, item, is_frame: bool) -> None:
        if is_frame and self.frames >= self.max_frames:
            for i, (_, fr) in enumerate(self.items):
                if fr:
                    del self.items[i]
                    self.frames -= 1
                    self.dropped += 1
                    break
        self.items.append((item, is_frame))
        if is_frame:
            self.frames += 1
        self._ready.set()

    async def pop(self):
        while not self.items:
            self._ready.clear()
            await self._ready.wait()
        item, is_frame = self.items.popleft()
        if is_frame:
            self.frames -= 1
        return item


class VoxcacheServer:
    """Renders the scene at a fixed tick rate and streams frames/stats/changesets.

    Scene mutation happens only on the tick loop; pass ``on_tick`` to script
    it (e.g. animations or replication tests).
    """

    def __init__(
        self,
        engine: Engine,
        port: int = 9000,
        tick_rate: float = 30.0,
        headless: bool = True,
        ui_dir: str | Path | None = None,
        on_tick=None,
    ):
        if tick_rate <= 0:
            raise ValueError("tick_rate must be > 0")
        self.engine = engine
        self.port = port
        self.tick_rate = tick_rate
        self.headless = headless  # no window API exists here; recorded for parity
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.on_tick = on_tick
        self.frame_id = 0
        self.ticks_done = 0
        self.bound_port: int | None = None
        self._sessions: dict = {}
        self._ids = itertools.count(1)
        self._stop = asyncio.Event()
        self._camera_msg: dict | None = None
        self._settings_msg: dict | None = None
        self._fps_window: deque[float] = deque(maxlen=30)

    def request_stop(self) -> None:
        self._stop.set()

    async def run(self) -> None:
        from websockets.asyncio.server import serve

        try:
            server = await serve(
                self._handle_client,
                "127.0.0.1",
                self.port,
                process_request=self._process_request if self.ui_dir else None,
                compression=None,
                max_size=16 * 1024 * 1024,
                close_timeout=1.0,  # a stalled client must not hold up shutdown
            )
        except OSError as exc:
            raise BindError(f"cannot bind port {self.port}: {exc}") from exc
        try:
            self.bound_port = server.sockets[0].getsockname()[1]
            # Discoverable by scripted clients; goes to stdout as a report.
            print(f"voxcache: listening on ws://127.0.0.1:{self.bound_port}", flush=True)
            await self._tick_loop()
        finally:
            server.close()
            await server.wait_closed()

    def _process_request(self, connection, request):
        """Serve the viewer's static assets on plain HTTP requests."""
        if "upgrade" in request.headers.get("Connection", "").lower():
            return None
        from websockets.datastructures import Headers
        from websockets.http11 import Response

        rel = request.path.split("?", 1)[0].lstrip("/") or "index.html"
        target = (self.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())) or not target.is_file():
            return Response(404, "Not Found", Headers([("Content-Type", "text/plain")]), b"not found")
        ctype = {
            ".html": "text/html",
            ".js": "text/javascript",
            ".css": "text/css",
            ".map": "application/json",
        }.get(target.suffix, "application/octet-stream")
        body = target.read_bytes()
        return Response(
            200,
            "OK",
            Headers([("Content-Type", ctype), ("Content-Length", str(len(body)))]),
            body,
        )

    async def _handle_client(self, ws) -> None:
        state = SessionState(client_id=next(self._ids))
        queue = _ClientQueue()
        self._sessions[ws] = (state, queue)
        writer = asyncio.create_task(self._writer(ws, queue))
        log.info("client %d connected", state.client_id)
        try:
            async for msg in ws:
                if isinstance(msg, (bytes, bytearray)):
                    log.warning("ignoring unexpected binary message from client %d", state.client_id)
                    continue
                self._handle_control(state, msg)
        except Exception as exc:
            log.info("client %d reader ended: %s", state.client_id, exc)
        finally:
            writer.cancel()
            self._sessions.pop(ws, None)
            log.info("client %d disconnected", state.client_id)

    async def _writer(self, ws, queue: _ClientQueue) -> None:
        try:
            while True:
                item = await queue.pop()
                await ws.send(item)
        except asyncio.CancelledError:
            pass
        except Exception as exc:
            log.info("writer ended: %s", exc)

    def _handle_control(self, state: SessionState, text: str) -> None:
        try:
            msg = json.loads(text)
        except json.JSONDecodeError:
            log.warning("ignoring unparseable control message")
            return
        kind = msg.get("type")
        if kind == "hello":
            state.wants_frames = bool(msg.get("wantsFrames", False))
            state.wants_stats = bool(msg.get("wantsStats", False))
        elif kind == "camera":
            self._camera_msg = msg
        elif kind == "settings":
            self._settings_msg = msg
        elif kind == "changeset-ack":
            state.last_ack_frame = int(msg.get("frameId", -1))
        elif kind == "stats":
            pass  # server-to-client only; tolerated
        else:
            log.warning("ignoring control message with unknown type %r", kind)

    def _apply_inputs(self) -> None:
        if self._camera_msg is not None:
            msg = self._camera_msg
            self._camera_msg = None
            try:
                cam = self.engine.camera
                self.engine.camera = Camera(
                    position=np.asarray(msg["pos"], dtype=np.float64),
                    orientation=np.asarray(msg["quat"], dtype=np.float64),
                    fov_y=float(msg.get("fovY", cam.fov_y)),
                    near=cam.near,
                    far=cam.far,
                    width=cam.width,
                    height=cam.height,
                )
            except (KeyError, ValueError, TypeError) as exc:
                log.warning("bad camera message: %s", exc)
        if self._settings_msg is not None:
            msg = self._settings_msg
            self._settings_msg = None
            s = self.engine.settings
            try:
                if "stepFactor" in msg:
                    s.step_factor = float(msg["stepFactor"])
                if "alphaThreshold" in msg:
                    s.alpha_threshold = float(msg["alphaThreshold"])
                if "background" in msg:
                    s.background = tuple(float(x) for x in msg["background"])
            except (ValueError, TypeError) as exc:
                log.warning("bad settings message: %s", exc)

    async def _tick_loop(self) -> None:
        loop = asyncio.get_running_loop()
        interval = 1.0 / self.tick_rate
        next_tick = loop.time()
        while not self._stop.is_set():
            start = time.perf_counter()
            self._tick_once()
            self._fps_window.append(time.perf_counter() - start)
            next_tick += interval
            delay = next_tick - loop.time()
            if delay <= 0:
                next_tick = loop.time()  # overran: don't try to catch up
                delay = 0
            try:
                await asyncio.wait_for(self._stop.wait(), timeout=max(delay, 1e-4))
            except asyncio.TimeoutError:
                pass

    def _tick_once(self) -> None:
        self._apply_inputs()
        if self.on_tick is not None:
            self.on_tick(self.frame_id, self.engine)
        changes = self.engine.scene.collect_changes()
        if changes:
            encoded = encode_changeset(changes)
            for state, queue in self._sessions.values():
                queue.push(encoded, is_frame=False)
        fb, fstats, cstats = self.engine.step(self.frame_id)
        frame_bytes = encode_frame(fb, self.frame_id)
        spf = sum(self._fps_window) / len(self._fps_window) if self._fps_window else 0.0
        stats_msg = json.dumps(
            {
                "type": "stats",
                "frameId": self.frame_id,
                "fps": (1.0 / spf) if spf > 0 else 0.0,
                **cstats.as_dict(),
                "absentSamples": fstats.absent_samples,
                "usedBlocks": fstats.used_blocks,
            }
        )
        for state, queue in self._sessions.values():
            if state.wants_frames:
                queue.push(frame_bytes, is_frame=True)
            if state.wants_stats:
                queue.push(stats_msg, is_frame=False)
        self.frame_id += 1
        self.ticks_done += 1


class BindError(OSError):
    """Startup failure: the requested port cannot be bound."""


def serve_scene(
    engine: Engine,
    port: int,
    tick_rate: float = 30.0,
    headless: bool = True,
    ui_dir=None,
    on_tick=None,
) -> VoxcacheServer:
    """Build a server; the caller runs ``asyncio.run(server.run())``."""
    return VoxcacheServer(
        engine, port=port, tick_rate=tick_rate, headless=headless, ui_dir=ui_dir, on_tick=on_tick
    )
