#!/usr/bin/env python3
"""Generate the golden fixture files under tests/fixtures/.

Self-contained on purpose: everything is derived from the documented formats
with local reference code (no package imports), so the fixtures stay an
independent check. Run once and commit the outputs; reruns are byte-stable.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


# --- pyramid directory ------------------------------------------------------

def downsample(arr: np.ndarray) -> np.ndarray:
    dz, dy, dx = arr.shape
    nz, ny, nx = -(-dz // 2), -(-dy // 2), -(-dx // 2)
    out = np.zeros((nz, ny, nx), dtype=arr.dtype)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                total = 0.0
                for oz in (0, 1):
                    for oy in (0, 1):
                        for ox in (0, 1):
                            total += float(
                                arr[min(2 * z + oz, dz - 1), min(2 * y + oy, dy - 1), min(2 * x + ox, dx - 1)]
                            )
                out[z, y, x] = int(math.floor(total / 8.0 + 0.5))
    return out


def level_blocks_bytes(level: np.ndarray, b: int) -> bytes:
    dz, dy, dx = level.shape
    gx, gy, gz = -(-dx // b), -(-dy // b), -(-dz // b)
    chunks = []
    for bz in range(gz):
        for by in range(gy):
            for bx in range(gx):
                core = np.zeros((b, b, b), dtype=level.dtype)
                sx = min(b, dx - bx * b)
                sy = min(b, dy - by * b)
                sz = min(b, dz - bz * b)
                core[:sz, :sy, :sx] = level[
                    bz * b : bz * b + sz, by * b : by * b + sy, bx * b : bx * b + sx
                ]
                chunks.append(core.tobytes())
    return b"".join(chunks)


def make_pyramid8() -> None:
    out = FIXTURES / "pyramid8"
    out.mkdir(parents=True, exist_ok=True)
    n = 8
    z, y, x = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    raw = ((3 * x + 5 * y + 7 * z) % 251).astype(np.uint8)
    level1 = downsample(raw)
    (out / "level0.blocks").write_bytes(level_blocks_bytes(raw, 4))
    (out / "level1.blocks").write_bytes(level_blocks_bytes(level1, 4))
    meta = {
        "volumeId": "fix8",
        "dims": [8, 8, 8],
        "voxelType": "u8",
        "voxelSize": [1.0, 1.0, 1.0],
        "blockSize": 4,
        "numLevels": 2,
        "formatVersion": 1,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


# --- value hashes -----------------------------------------------------------

TAG_IDS = {
    "Int32": 1, "Int64": 2, "Float32": 3, "Vec3F": 4,
    "Vec4F": 5, "Mat4F": 6, "Bool": 7, "String": 8,
}


def canonical(tag: str, value) -> bytes:
    if tag == "Int32":
        return struct.pack("<i", value)
    if tag == "Int64":
        return struct.pack("<q", value)
    if tag == "Float32":
        return struct.pack("<f", value)
    if tag == "Vec3F":
        return struct.pack("<3f", *value)
    if tag == "Vec4F":
        return struct.pack("<4f", *value)
    if tag == "Mat4F":
        return struct.pack("<16f", *value)
    if tag == "Bool":
        return b"\x01" if value else b"\x00"
    if tag == "String":
        return value.encode("utf-8")
    raise AssertionError(tag)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) % (1 << 64)
    return h


def make_hashes() -> None:
    ident = [1.0 if i % 5 == 0 else 0.0 for i in range(16)]
    samples = [
        ("Int32", 0), ("Int32", 1), ("Int32", 2), ("Int32", -1),
        ("Int64", 1 << 40), ("Int64", -(1 << 40)),
        ("Float32", 0.0), ("Float32", -0.0), ("Float32", 1.5), ("Float32", 3.25),
        ("Vec3F", [1.0, 2.0, 3.0]), ("Vec4F", [0.5, 0.25, 0.125, 1.0]),
        ("Mat4F", ident),
        ("Bool", True), ("Bool", False),
        ("String", ""), ("String", "hello"), ("String", "µvoxel"),
    ]
    rows = []
    for tag, value in samples:
        digest = fnv1a64(bytes([TAG_IDS[tag]]) + canonical(tag, value))
        rows.append({"tag": tag, "value": value, "hash": digest})
    (FIXTURES / "hashes_golden.json").write_text(json.dumps(rows, indent=2) + "\n")


# --- wire fixtures ----------------------------------------------------------

def make_wire() -> None:
    header = struct.pack("<4sBQHHBI", b"SCFR", 1, 7, 2, 1, 0, 8)
    payload = bytes([255, 0, 0, 255, 0, 255, 0, 255])
    (FIXTURES / "frame_2x1.bin").write_bytes(header + payload)

    cs = b"".join(
        [
            b"SCCS",
            bytes([1]),
            struct.pack("<I", 1),
            struct.pack("<QH", 42, 5),
            b"level",
            bytes([TAG_IDS["Int32"]]),
            struct.pack("<I", 4),
            struct.pack("<i", 7),
        ]
    )
    (FIXTURES / "changeset_int32.bin").write_bytes(cs)


if __name__ == "__main__":
    FIXTURES.mkdir(parents=True, exist_ok=True)
    make_pyramid8()
    make_hashes()
    make_wire()
    print(f"fixtures written to {FIXTURES}")
