"""Per-frame lookup grid construction.

One grid per volume per frame: a dense array with one entry per base-level
block. Present entries redirect base-level voxel coordinates into the cache
texture through an affine (offset, scale) pair; absent entries render as
nothing while their block loads. A block resident at a coarser level than
desired still gets a (coarser) entry, and the desired block is requested in
the background, so refinement is gradual and frames never stall.

The affine contract: for a continuous base-level coordinate ``v`` inside
block ``g`` whose entry points at a slot holding the level ``base+d`` block,
``offset + v * scale`` equals ``slotDataOrigin + (v / 2**d - levelBlockOrigin)``,
i.e. it lands on the cache-texture voxel holding ``v``. ``offset`` components
are exact integers and ``scale`` is an exact power of two, so evaluating in
float64 reproduces direct level sampling bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cache import CacheTexture, LoadQueue
from .camera import Camera, aabbs_in_frustum, point_aabb_distance, transform_aabb
from .pyramid import BlockKey, VolumeMeta, ceil_div, level_dims


@dataclass
class ResolutionPolicy:
    """Tuning knobs for level selection.

    ``pixel_tolerance``: data voxels per screen pixel accepted before dropping
    to a coarser level. ``distance_doubling``: multiplier on the near distance
    that sets the length of the first level-doubling octave; 1.0 doubles the
    desired level every doubling of viewer distance.
    """

    pixel_tolerance: float = 1.0
    distance_doubling: float = 1.0

    def __post_init__(self):
        if self.pixel_tolerance <= 0 or self.distance_doubling <= 0:
            raise ValueError("policy constants must be > 0")


class LookupGrid:
    """Dense per-block indirection entries for one volume at one base level."""

    def __init__(self, volume_id: str, base_level: int, grid_dims: tuple[int, int, int]):
        self.volume_id = volume_id
        self.base_level = base_level
        self.grid_dims = grid_dims
        gx, gy, gz = grid_dims
        self.present = np.zeros((gz, gy, gx), dtype=bool)
        self.offset = np.zeros((gz, gy, gx, 3), dtype=np.float32)
        self.scale = np.ones((gz, gy, gx), dtype=np.float32)
        self.level = np.full((gz, gy, gx), -1, dtype=np.int32)  # resident level, -1 absent
        self.marked_used = 0

    @property
    def entry_count(self) -> int:
        return int(np.prod(self.present.shape))

    def set_entry(self, g: tuple[int, int, int], offset, scale: float, level: int) -> None:
        gx, gy, gz = g
        self.present[gz, gy, gx] = True
        self.offset[gz, gy, gx] = offset
        self.scale[gz, gy, gx] = scale
        self.level[gz, gy, gx] = level

    def dump(self) -> str:
        """Debug text: one line per entry, x-fastest."""
        gx, gy, gz = self.grid_dims
        lines = [f"volume={self.volume_id} base={self.base_level} grid={gx}x{gy}x{gz}"]
        for z in range(gz):
            for y in range(gy):
                for x in range(gx):
                    if self.present[z, y, x]:
                        o = self.offset[z, y, x]
                        lines.append(
                            f"({x},{y},{z}) level={int(self.level[z,y,x])} "
                            f"scale={float(self.scale[z,y,x]):g} "
                            f"offset=({o[0]:g},{o[1]:g},{o[2]:g})"
                        )
                    else:
                        lines.append(f"({x},{y},{z}) absent")
        return "\n".join(lines)


def base_level_for_density(voxels_per_pixel: float, pixel_tolerance: float, n_levels: int) -> int:
    """Finest level whose voxels are at least ``pixel_tolerance`` pixels on screen."""
    if voxels_per_pixel <= pixel_tolerance:
        return 0
    lvl = math.floor(math.log2(voxels_per_pixel / pixel_tolerance))
    return max(0, min(lvl, n_levels - 1))


def world_voxel_edge(world: np.ndarray, meta: VolumeMeta, level: int) -> float:
    """World-space edge of a voxel at ``level``: the finest axis of the placed volume."""
    dims = level_dims(meta.dims, level)
    cols = np.linalg.norm(world[:3, :3], axis=0)
    return float(min(cols[i] / dims[i] for i in range(3)))


def select_base_level(camera: Camera, world: np.ndarray, meta: VolumeMeta) -> int:
    """Base level whose voxels roughly match screen resolution at the nearest visible point.

    The nearest-point distance is clamped to the camera near plane; a volume
    fully behind the camera yields the coarsest level.
    """
    lo, hi = transform_aabb(world, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    corners = np.array(
        [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    )
    view = camera.view_matrix()
    cam_z = corners @ view[2, :3] + view[2, 3]
    if (cam_z > -camera.near).all():  # entirely behind the near plane
        return meta.num_levels - 1
    z_near = max(point_aabb_distance(camera.position, lo, hi), camera.near)
    edge_px = world_voxel_edge(world, meta, 0) * camera.focal_px() / z_near
    voxels_per_pixel = 1.0 / edge_px
    return base_level_for_density(voxels_per_pixel, 1.0, meta.num_levels)


def desired_level(
    block_center_world,
    eye_world,
    base_level: int,
    z_near: float,
    policy: ResolutionPolicy,
    n_levels: int,
) -> int:
    """Per-block level: one coarser per doubling of viewer distance past the near point."""
    dist = float(np.linalg.norm(np.asarray(block_center_world, dtype=np.float64) - eye_world))
    ref = z_near * policy.distance_doubling
    lvl = base_level + math.floor(math.log2(max(dist, ref) / ref))
    return max(base_level, min(lvl, n_levels - 1))


def make_entry(
    g: tuple[int, int, int], d: int, slot_data_origin: tuple[int, int, int], block_size: int
) -> tuple[np.ndarray, float]:
    """Affine (offset, scale) for base block ``g`` resident at level delta ``d``."""
    if d < 0:
        raise ValueError("level delta must be >= 0")
    lb = (g[0] >> d, g[1] >> d, g[2] >> d)
    scale = 2.0**-d
    offset = np.array(
        [slot_data_origin[i] - lb[i] * block_size for i in range(3)], dtype=np.float32
    )
    return offset, scale


def build_lookup(
    meta: VolumeMeta,
    world: np.ndarray,
    camera: Camera,
    tex: CacheTexture,
    queue: LoadQueue,
    policy: ResolutionPolicy,
    frame_id: int,
    base_level: int | None = None,
) -> tuple[LookupGrid, list[BlockKey]]:
    """Build the frame's lookup grid for one volume and enqueue missing blocks.

    Every base block intersecting the frustum gets either an entry at its
    desired level, a fallback entry at the nearest coarser resident level
    (plus a request for the desired block), or an absent entry plus a request.
    Resident blocks referenced by an entry are LRU-touched for this frame.
    """
    if base_level is None:
        base_level = select_base_level(camera, world, meta)
    b = meta.block_size
    n_levels = meta.num_levels
    dims_b = level_dims(meta.dims, base_level)
    gdims = tuple(ceil_div(dims_b[i], b) for i in range(3))
    grid = LookupGrid(meta.volume_id, base_level, gdims)
    requests: list[BlockKey] = []

    gx, gy, gz = gdims
    bx, by, bz = np.meshgrid(np.arange(gx), np.arange(gy), np.arange(gz), indexing="ij")
    coords = np.column_stack([bx.ravel(), by.ravel(), bz.ravel()])  # (N,3) block coords

    # Block AABBs in local unit-cube space, then world (interval arithmetic).
    lo_l = coords * b / np.asarray(dims_b, dtype=np.float64)
    hi_l = np.minimum((coords + 1) * b, np.asarray(dims_b)) / np.asarray(dims_b, dtype=np.float64)
    lin, trans = world[:3, :3], world[:3, 3]
    c_l = (lo_l + hi_l) / 2.0
    h_l = (hi_l - lo_l) / 2.0
    c_w = c_l @ lin.T + trans
    h_w = h_l @ np.abs(lin).T
    visible = aabbs_in_frustum(camera.frustum_planes(), c_w - h_w, c_w + h_w)

    vol_lo, vol_hi = transform_aabb(world, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    z_near = max(point_aabb_distance(camera.position, vol_lo, vol_hi), camera.near)
    eye = camera.position

    for i in np.flatnonzero(visible):
        g = (int(coords[i, 0]), int(coords[i, 1]), int(coords[i, 2]))
        dist = float(np.linalg.norm(c_w[i] - eye))
        want = desired_level(c_w[i], eye, base_level, z_near, policy, n_levels)
        want_key = BlockKey(meta.volume_id, want, g[0] >> (want - base_level),
                            g[1] >> (want - base_level), g[2] >> (want - base_level))
        placed = False
        for lvl in range(want, n_levels):
            d = lvl - base_level
            key = BlockKey(meta.volume_id, lvl, g[0] >> d, g[1] >> d, g[2] >> d)
            slot = tex.slot_of(key)
            if slot is None:
                continue
            offset, scale = make_entry(g, d, tex.slot_data_origin(slot), b)
            grid.set_entry(g, offset, scale, lvl)
            tex.mark_used(key, frame_id)
            grid.marked_used += 1
            placed = lvl == want
            break
        if not placed:
            fresh = want_key not in queue
            queue.request(want_key, dist)  # duplicates only tighten the priority
            if fresh:
                requests.append(want_key)
    return grid, requests
