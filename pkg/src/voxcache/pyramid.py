"""Multi-resolution block pyramid: data model, on-disk format, padded block reads.

Conventions used across the package:

* Logical dimensions are ``(x, y, z)`` tuples.
* Voxel arrays are numpy arrays indexed ``[z, y, x]`` so that ``tobytes()``
  yields x-fastest order, matching the on-disk layout.
* A pyramid level ``l`` halves each dimension with ceiling division;
  level 0 is full resolution.
* Blocks are ``B`` voxels on edge. A padded block read returns ``(B+2)**3``
  voxels: the core plus a one-voxel border so trilinear interpolation never
  bleeds across block seams.

On-disk pyramid format (``formatVersion`` 1): a directory with ``meta.json``
and one ``level{l}.blocks`` file per level holding unpadded ``B**3`` blocks in
block-index order, little-endian, x-fastest; edge blocks are zero-padded to the
full block size.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

VOXEL_DTYPES = {"u8": np.dtype("<u1"), "u16": np.dtype("<u2")}
VOXEL_MAX = {"u8": 255.0, "u16": 65535.0}

FORMAT_VERSION = 1

# Hard caps from the addressing scheme: 64-bit block indices and at most
# 2**31 voxels per block.
MAX_BLOCK_VOXELS = 2**31
MAX_BLOCK_COUNT = 2**64 - 1


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def level_dims(dims0: tuple[int, int, int], level: int) -> tuple[int, int, int]:
    """Dimensions of pyramid level ``level``: componentwise ceil(dims0 / 2**level)."""
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    f = 2**level
    return (ceil_div(dims0[0], f), ceil_div(dims0[1], f), ceil_div(dims0[2], f))


def num_levels(dims0: tuple[int, int, int], block_size: int) -> int:
    """Smallest level count L such that every component of level L-1 fits one block."""
    if min(dims0) < 1:
        raise ValueError(f"dims must be >= 1, got {dims0}")
    if block_size < 4:
        raise ValueError(f"block_size must be >= 4, got {block_size}")
    n = 1
    while max(level_dims(dims0, n - 1)) > block_size:
        n += 1
    return n


def block_index(grid_dims: tuple[int, int, int], bx: int, by: int, bz: int) -> int:
    """Linear 64-bit block index, x-fastest; bijective over the block grid."""
    gx, gy, gz = grid_dims
    if not (0 <= bx < gx and 0 <= by < gy and 0 <= bz < gz):
        raise ValueError(f"block coords ({bx},{by},{bz}) outside grid {grid_dims}")
    return bx + gx * (by + gy * bz)


@dataclass(frozen=True)
class VolumeMeta:
    """Static description of one multi-resolution volume."""

    volume_id: str
    dims: tuple[int, int, int]  # level-0 size in voxels, (x, y, z)
    voxel_type: str  # "u8" | "u16"
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    block_size: int = 32
    num_levels: int = 0  # 0 means: derive from dims and block_size

    def __post_init__(self):
        if self.voxel_type not in VOXEL_DTYPES:
            raise ValueError(f"unsupported voxel type {self.voxel_type!r}")
        if self.block_size < 4:
            raise ValueError(f"block_size must be >= 4, got {self.block_size}")
        if self.block_size**3 > MAX_BLOCK_VOXELS:
            raise ValueError(f"block_size {self.block_size} exceeds 2^31 voxels per block")
        if min(self.dims) < 1:
            raise ValueError(f"dims must be >= 1, got {self.dims}")
        derived = num_levels(self.dims, self.block_size)
        if self.num_levels == 0:
            object.__setattr__(self, "num_levels", derived)
        elif self.num_levels != derived:
            raise ValueError(
                f"num_levels {self.num_levels} inconsistent with dims/block_size (need {derived})"
            )
        for lvl in range(self.num_levels):
            g = self.grid_dims(lvl)
            if g[0] * g[1] * g[2] > MAX_BLOCK_COUNT:
                raise ValueError(f"level {lvl} block count exceeds 64-bit index range")

    @property
    def dtype(self) -> np.dtype:
        return VOXEL_DTYPES[self.voxel_type]

    @property
    def value_max(self) -> float:
        return VOXEL_MAX[self.voxel_type]

    def level_dims(self, level: int) -> tuple[int, int, int]:
        if not 0 <= level < self.num_levels:
            raise ValueError(f"level {level} out of range [0, {self.num_levels})")
        return level_dims(self.dims, level)

    def grid_dims(self, level: int) -> tuple[int, int, int]:
        d = self.level_dims(level)
        b = self.block_size
        return (ceil_div(d[0], b), ceil_div(d[1], b), ceil_div(d[2], b))


@dataclass(frozen=True)
class BlockKey:
    """Identifies one block of one volume at one pyramid level."""

    volume_id: str
    level: int
    bx: int
    by: int
    bz: int

    def coords(self) -> tuple[int, int, int]:
        return (self.bx, self.by, self.bz)


@dataclass
class BlockData:
    """A padded block payload: ``(B+2)**3`` voxels indexed [z, y, x]."""

    key: BlockKey
    payload: np.ndarray


def validate_key(meta: VolumeMeta, key: BlockKey) -> None:
    if key.volume_id != meta.volume_id:
        raise ValueError(f"key volume {key.volume_id!r} does not match {meta.volume_id!r}")
    if not 0 <= key.level < meta.num_levels:
        raise ValueError(f"level {key.level} out of range [0, {meta.num_levels})")
    g = meta.grid_dims(key.level)
    if not (0 <= key.bx < g[0] and 0 <= key.by < g[1] and 0 <= key.bz < g[2]):
        raise ValueError(f"block coords {key.coords()} outside grid {g} at level {key.level}")


def _padded_axis_coords(origin: int, b: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis global coordinates of a padded block and their edge-clamped values.

    Returns ``(clamped, beyond)`` where ``beyond`` marks coordinates more than
    one voxel past the volume extent. Coordinates within one voxel of the
    volume clamp to the edge (ghost layer); anything further out is zeroed by
    the caller. The low side never goes below -1, so it always clamps.
    """
    coords = np.arange(origin - 1, origin + b + 1, dtype=np.int64)
    clamped = np.clip(coords, 0, dim - 1)
    beyond = coords > dim
    return clamped, beyond


def assemble_padded(
    key: BlockKey,
    meta: VolumeMeta,
    gather: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
) -> np.ndarray:
    """Build a padded payload from a per-axis index gather over level data.

    ``gather(ez, ey, ex)`` must return the level voxels at the outer product of
    the given per-axis (already clamped) coordinate vectors, shaped [z, y, x].
    """
    b = meta.block_size
    dx, dy, dz = meta.level_dims(key.level)
    ex, beyond_x = _padded_axis_coords(key.bx * b, b, dx)
    ey, beyond_y = _padded_axis_coords(key.by * b, b, dy)
    ez, beyond_z = _padded_axis_coords(key.bz * b, b, dz)
    payload = np.ascontiguousarray(gather(ez, ey, ex))
    zero = beyond_z[:, None, None] | beyond_y[None, :, None] | beyond_x[None, None, :]
    if zero.any():
        payload[zero] = 0
    return payload


class BlockSource:
    """Abstract provider of padded blocks; ``read`` is pure and deterministic."""

    meta: VolumeMeta

    def read(self, key: BlockKey) -> BlockData:
        raise NotImplementedError


class ArraySource(BlockSource):
    """Pyramid backed by in-memory per-level arrays (indexed [z, y, x])."""

    def __init__(self, meta: VolumeMeta, levels: list[np.ndarray]):
        if len(levels) != meta.num_levels:
            raise ValueError(f"expected {meta.num_levels} level arrays, got {len(levels)}")
        for lvl, arr in enumerate(levels):
            dx, dy, dz = meta.level_dims(lvl)
            if arr.shape != (dz, dy, dx):
                raise ValueError(f"level {lvl} array shape {arr.shape} != {(dz, dy, dx)}")
        self.meta = meta
        self.levels = [np.ascontiguousarray(a, dtype=meta.dtype) for a in levels]

    def read(self, key: BlockKey) -> BlockData:
        validate_key(self.meta, key)
        arr = self.levels[key.level]
        payload = assemble_padded(key, self.meta, lambda ez, ey, ex: arr[np.ix_(ez, ey, ex)])
        return BlockData(key, payload)


class ProceduralSource(BlockSource):
    """Pyramid defined by a function of normalized voxel-center coordinates.

    ``field(xn, yn, zn)`` receives broadcastable arrays in [0, 1] and returns
    values in [0, 1]; they are quantized to the voxel type. Enables virtual
    volumes far larger than RAM.
    """

    def __init__(self, meta: VolumeMeta, field: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]):
        self.meta = meta
        self.field = field

    def read(self, key: BlockKey) -> BlockData:
        validate_key(self.meta, key)
        meta = self.meta
        dx, dy, dz = meta.level_dims(key.level)

        def gather(ez, ey, ex):
            xn = (ex.astype(np.float64) + 0.5) / dx
            yn = (ey.astype(np.float64) + 0.5) / dy
            zn = (ez.astype(np.float64) + 0.5) / dz
            vals = self.field(xn[None, None, :], yn[None, :, None], zn[:, None, None])
            vals = np.clip(np.asarray(vals, dtype=np.float64), 0.0, 1.0)
            shape = (len(ez), len(ey), len(ex))
            quant = np.floor(vals * meta.value_max + 0.5).astype(meta.dtype)
            return np.broadcast_to(quant, shape).copy()

        return BlockData(key, assemble_padded(key, meta, gather))


def field_sphere(xn, yn, zn):
    """Smooth radial falloff around the volume center; 1 at center, 0 at corners."""
    r2 = (xn - 0.5) ** 2 + (yn - 0.5) ** 2 + (zn - 0.5) ** 2
    return np.clip(1.0 - np.sqrt(r2) / 0.75, 0.0, 1.0)


def field_ramp_x(xn, yn, zn):
    """Linear ramp along x, constant in y/z."""
    return xn + 0.0 * yn + 0.0 * zn


def field_shells(xn, yn, zn):
    """Concentric smooth shells; exercises many distinct block payloads."""
    r = np.sqrt((xn - 0.5) ** 2 + (yn - 0.5) ** 2 + (zn - 0.5) ** 2)
    return 0.5 + 0.5 * np.cos(r * 40.0)


PROCEDURAL_FIELDS = {
    "sphere": field_sphere,
    "ramp-x": field_ramp_x,
    "shells": field_shells,
}


class FilePyramid(BlockSource):
    """File-backed pyramid; reads gather directly from memory-mapped level files."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        meta_path = self.path / "meta.json"
        try:
            raw = json.loads(meta_path.read_text())
        except OSError as exc:
            raise ValueError(f"cannot read pyramid meta at {meta_path}: {exc}") from exc
        if raw.get("formatVersion") != FORMAT_VERSION:
            raise ValueError(f"unsupported formatVersion {raw.get('formatVersion')!r}")
        self.meta = VolumeMeta(
            volume_id=raw["volumeId"],
            dims=tuple(raw["dims"]),
            voxel_type=raw["voxelType"],
            voxel_size=tuple(raw["voxelSize"]),
            block_size=raw["blockSize"],
            num_levels=raw["numLevels"],
        )
        self._maps: list[np.ndarray] = []
        bvox = self.meta.block_size**3
        for lvl in range(self.meta.num_levels):
            g = self.meta.grid_dims(lvl)
            n = g[0] * g[1] * g[2] * bvox
            f = self.path / f"level{lvl}.blocks"
            mm = np.memmap(f, dtype=self.meta.dtype, mode="r")
            if mm.size != n:
                raise ValueError(f"{f} holds {mm.size} voxels, expected {n}")
            self._maps.append(mm)

    def read(self, key: BlockKey) -> BlockData:
        validate_key(self.meta, key)
        meta = self.meta
        b = meta.block_size
        gx, gy, gz = meta.grid_dims(key.level)
        mm = self._maps[key.level]

        def gather(ez, ey, ex):
            # Flat file index decomposes into independent per-axis terms:
            # blocks are B^3 voxels in block_index order, x-fastest within.
            ix = (ex // b) * b**3 + (ex % b)
            iy = (ey // b) * (gx * b**3) + (ey % b) * b
            iz = (ez // b) * (gx * gy * b**3) + (ez % b) * b**2
            flat = iz[:, None, None] + iy[None, :, None] + ix[None, None, :]
            return mm[flat]

        return BlockData(key, assemble_padded(key, meta, gather))


def downsample_mean(arr: np.ndarray) -> np.ndarray:
    """One pyramid step: 2x2x2 mean with clamp-to-edge replication for odd dims,
    rounded half-up back to the integer type."""
    dz, dy, dx = arr.shape
    pz, py, px = dz % 2, dy % 2, dx % 2
    if pz or py or px:
        arr = np.pad(arr, ((0, pz), (0, py), (0, px)), mode="edge")
    a = arr.astype(np.float64)
    nz, ny, nx = a.shape[0] // 2, a.shape[1] // 2, a.shape[2] // 2
    mean = a.reshape(nz, 2, ny, 2, nx, 2).mean(axis=(1, 3, 5))
    return np.floor(mean + 0.5).astype(arr.dtype)


def build_levels(raw: np.ndarray, meta: VolumeMeta) -> list[np.ndarray]:
    """All pyramid levels for a raw level-0 array."""
    levels = [np.ascontiguousarray(raw, dtype=meta.dtype)]
    for _ in range(1, meta.num_levels):
        levels.append(downsample_mean(levels[-1]))
    return levels


def write_pyramid(levels: list[np.ndarray], meta: VolumeMeta, out_path: str | Path) -> Path:
    """Write pyramid levels to disk in the block file format; returns the directory."""
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    b = meta.block_size
    for lvl, arr in enumerate(levels):
        gx, gy, gz = meta.grid_dims(lvl)
        dx, dy, dz = meta.level_dims(lvl)
        with open(out / f"level{lvl}.blocks", "wb") as f:
            core = np.zeros((b, b, b), dtype=meta.dtype)
            for bz in range(gz):
                for by in range(gy):
                    for bx in range(gx):
                        x0, y0, z0 = bx * b, by * b, bz * b
                        sx = min(b, dx - x0)
                        sy = min(b, dy - y0)
                        sz = min(b, dz - z0)
                        core[:] = 0
                        core[:sz, :sy, :sx] = arr[z0 : z0 + sz, y0 : y0 + sy, x0 : x0 + sx]
                        f.write(core.tobytes())
    meta_json = {
        "volumeId": meta.volume_id,
        "dims": list(meta.dims),
        "voxelType": meta.voxel_type,
        "voxelSize": list(meta.voxel_size),
        "blockSize": meta.block_size,
        "numLevels": meta.num_levels,
        "formatVersion": FORMAT_VERSION,
    }
    (out / "meta.json").write_text(json.dumps(meta_json, indent=2) + "\n")
    return out


def build_pyramid(raw: np.ndarray, meta: VolumeMeta, out_path: str | Path) -> FilePyramid:
    """Ingest a dense level-0 array: downsample all levels and write them to disk."""
    dx, dy, dz = meta.dims
    if raw.shape != (dz, dy, dx):
        raise ValueError(f"raw shape {raw.shape} does not match dims {meta.dims} as (z,y,x)")
    if np.dtype(raw.dtype) != meta.dtype:
        raise ValueError(f"raw dtype {raw.dtype} does not match voxel type {meta.voxel_type}")
    write_pyramid(build_levels(raw, meta), meta, out_path)
    return FilePyramid(out_path)


def read_block(source: BlockSource, key: BlockKey) -> BlockData:
    """Padded block read; see ``BlockSource.read`` for the contract."""
    return source.read(key)
