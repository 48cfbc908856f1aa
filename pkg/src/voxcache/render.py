"""Software raycaster: depth pre-pass, adaptive ray marching through multiple
affinely placed volumes with lookup-grid indirection, transfer functions, and
front-to-back compositing.

Sampling conventions (project-wide):

* Voxel centers sit at integer + 0.5; a sample at coordinate ``c``
  interpolates the voxels ``floor(c - 0.5)`` and ``floor(c - 0.5) + 1`` per
  axis, with indices clamped to the array (clamp-to-edge).
* The depth buffer stores the world-space ray parameter ``t``, which is
  view-axis depth (see the camera module), not NDC depth: a fronto-parallel
  occluder at distance d reads back as exactly d everywhere.
* The marching step doubles per distance octave past the nearest volume:
  ``dt(t) = stepFactor * refVoxel * 2**floor(log2(max(t, zRef) / zRef))``
  where ``refVoxel`` is the finest base-level voxel edge among the volumes in
  the scene and ``zRef`` is the smallest eye-to-volume-AABB distance (clamped
  to the camera near plane) - the same reference the per-block level
  selection uses, so sampling rate tracks data resolution. Samples are taken
  at ``t``, then ``t`` advances by ``dt(t)``, while ``t < tStop`` and
  accumulated alpha stays below the threshold.
* At each step the volumes containing the point are composited in ascending
  volume-id order. Absent samples (block not resident) contribute nothing.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .cache import CacheTexture
from .camera import Camera, ray_box_ts, transform_points
from .lookup import LookupGrid, world_voxel_edge
from .pyramid import VolumeMeta, level_dims

log = logging.getLogger(__name__)


class TransferFunction:
    """Piecewise-linear map from normalized intensity to RGBA, clamped outside."""

    def __init__(self, control_points):
        pts = sorted(control_points, key=lambda p: p[0])
        if not pts:
            raise ValueError("need at least one control point")
        vals = [p[0] for p in pts]
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("control point values must be strictly increasing")
        self.values = np.array(vals, dtype=np.float64)
        self.colors = np.array([p[1] for p in pts], dtype=np.float64)
        if self.colors.shape[1] != 4:
            raise ValueError("control points must carry RGBA")

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        out = np.empty(v.shape + (4,))
        for c in range(4):
            out[..., c] = np.interp(v, self.values, self.colors[:, c])
        return out

    def as_json(self):
        return [[float(v)] + [float(c) for c in rgba] for v, rgba in zip(self.values, self.colors)]


@dataclass
class RenderSettings:
    step_factor: float = 0.5
    alpha_threshold: float = 0.99
    background: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.step_factor <= 0:
            raise ValueError("step_factor must be > 0")
        if not 0 < self.alpha_threshold <= 1:
            raise ValueError("alpha_threshold must be in (0, 1]")


@dataclass
class FrameBuffer:
    color: np.ndarray  # (H, W, 4) uint8
    depth: np.ndarray  # (H, W) float64, world-space ray parameter

    @property
    def width(self) -> int:
        return self.color.shape[1]

    @property
    def height(self) -> int:
        return self.color.shape[0]


@dataclass
class FrameStats:
    frame_id: int = 0
    rays: int = 0
    steps: int = 0
    taken_samples: int = 0
    absent_samples: int = 0
    used_blocks: int = 0
    render_seconds: float = 0.0

    def as_dict(self) -> dict:
        return {
            "frameId": self.frame_id,
            "rays": self.rays,
            "steps": self.steps,
            "takenSamples": self.taken_samples,
            "absentSamples": self.absent_samples,
            "usedBlocks": self.used_blocks,
            "renderSeconds": self.render_seconds,
        }


@dataclass
class VolumeInstance:
    """A volume placed in the scene; the unit cube [0,1]^3 maps through ``world``."""

    meta: VolumeMeta
    world: np.ndarray
    transfer: TransferFunction
    source: object = None  # BlockSource; engine uses it to feed the caches
    lookup: LookupGrid | None = None  # set per frame for out-of-core volumes
    level0: np.ndarray | None = None  # in-memory volume: sampled directly

    def __post_init__(self):
        self.world = np.asarray(self.world, dtype=np.float64).reshape(4, 4)

    @property
    def in_memory(self) -> bool:
        return self.level0 is not None


@dataclass
class MeshInstance:
    """Triangle mesh acting as a depth-only occluder."""

    positions: np.ndarray  # (V, 3)
    indices: np.ndarray  # (T, 3) int
    world: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        self.world = np.asarray(self.world, dtype=np.float64).reshape(4, 4)


def trilinear(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear sample of [z,y,x] data at (N,3) x,y,z coordinates (clamp-to-edge)."""
    nz, ny, nx = data.shape
    q = np.asarray(coords, dtype=np.float64) - 0.5
    i0 = np.floor(q).astype(np.int64)
    f = q - i0
    x0 = np.clip(i0[:, 0], 0, nx - 1)
    y0 = np.clip(i0[:, 1], 0, ny - 1)
    z0 = np.clip(i0[:, 2], 0, nz - 1)
    x1 = np.clip(i0[:, 0] + 1, 0, nx - 1)
    y1 = np.clip(i0[:, 1] + 1, 0, ny - 1)
    z1 = np.clip(i0[:, 2] + 1, 0, nz - 1)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    d = data
    c00 = d[z0, y0, x0] * (1 - fx) + d[z0, y0, x1] * fx
    c01 = d[z0, y1, x0] * (1 - fx) + d[z0, y1, x1] * fx
    c10 = d[z1, y0, x0] * (1 - fx) + d[z1, y0, x1] * fx
    c11 = d[z1, y1, x0] * (1 - fx) + d[z1, y1, x1] * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def sample_volume(
    vol: VolumeInstance, tex: CacheTexture | None, local: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sample a volume at (N,3) local unit-cube coordinates.

    Returns (values normalized to [0,1], present mask). Out-of-core volumes go
    through the lookup grid into the cache texture; in-memory volumes sample
    their level-0 array directly.
    """
    local = np.asarray(local, dtype=np.float64)
    n = local.shape[0]
    if vol.in_memory:
        dims = np.asarray(vol.meta.dims, dtype=np.float64)
        vals = trilinear(vol.level0, local * dims) / vol.meta.value_max
        return vals, np.ones(n, dtype=bool)

    grid = vol.lookup
    if grid is None or tex is None:
        return np.zeros(n), np.zeros(n, dtype=bool)
    dims_b = np.asarray(level_dims(vol.meta.dims, grid.base_level), dtype=np.float64)
    b = vol.meta.block_size
    v = local * dims_b
    cell = np.floor(v / b).astype(np.int64)
    for axis in range(3):
        np.clip(cell[:, axis], 0, grid.grid_dims[axis] - 1, out=cell[:, axis])
    cz, cy, cx = cell[:, 2], cell[:, 1], cell[:, 0]
    present = grid.present[cz, cy, cx]
    vals = np.zeros(n)
    if present.any():
        sel = np.flatnonzero(present)
        off = grid.offset[cz[sel], cy[sel], cx[sel]].astype(np.float64)
        sc = grid.scale[cz[sel], cy[sel], cx[sel]].astype(np.float64)
        cache_coords = off + v[sel] * sc[:, None]
        vals[sel] = trilinear(tex.data, cache_coords) / vol.meta.value_max
    return vals, present


def intersect_volume(
    origin: np.ndarray, dirs: np.ndarray, world: np.ndarray
) -> tuple[np.ndarray, np.ndarray] | None:
    """Entry/exit ray parameters against a volume's transformed unit cube.

    Returns None (volume skipped) when the transform is singular.
    """
    try:
        inv = np.linalg.inv(world)
    except np.linalg.LinAlgError:
        log.warning("volume transform is singular; skipping volume")
        return None
    return ray_box_ts(origin, dirs, inv)


def composite_step(accum: np.ndarray, sample: np.ndarray, step_len: float, ref_step: float) -> np.ndarray:
    """One front-to-back step with opacity correction for variable step size."""
    accum = np.asarray(accum, dtype=np.float64).copy()
    r, g, b, a = sample
    a_corr = 1.0 - (1.0 - a) ** (step_len / ref_step)
    w = (1.0 - accum[3]) * a_corr
    accum[0] += w * r
    accum[1] += w * g
    accum[2] += w * b
    accum[3] += w
    return accum


def rasterize_depth(meshes: list[MeshInstance], camera: Camera) -> np.ndarray:
    """Per-pixel minimal ray parameter of any triangle intersection; far elsewhere.

    Coverage is the inclusive barycentric test of the pixel-center ray against
    each world-space triangle (perspective-correct by construction); shared
    edges may be hit by both triangles, which the depth minimum makes benign.
    Degenerate triangles are skipped.
    """
    h, w = camera.height, camera.width
    depth = np.full(h * w, camera.far, dtype=np.float64)
    if not meshes:
        return depth.reshape(h, w)
    dirs = camera.ray_directions().reshape(-1, 3)
    origin = camera.position
    for mesh in meshes:
        verts = transform_points(mesh.world, mesh.positions)
        for tri in mesh.indices:
            v0, v1, v2 = verts[tri[0]], verts[tri[1]], verts[tri[2]]
            e1 = v1 - v0
            e2 = v2 - v0
            if np.linalg.norm(np.cross(e1, e2)) < 1e-15:
                continue
            pvec = np.cross(dirs, e2)
            det = pvec @ e1
            ok = np.abs(det) > 1e-15
            with np.errstate(divide="ignore", invalid="ignore"):
                inv_det = np.where(ok, 1.0 / det, 0.0)
                tvec = origin - v0
                u = (pvec @ tvec) * inv_det
                qvec = np.cross(tvec, e1)
                vv = (dirs @ qvec) * inv_det
                t = (e2 @ qvec) * inv_det
            hit = ok & (u >= 0.0) & (vv >= 0.0) & (u + vv <= 1.0) & (t > 1e-12)
            np.minimum(depth, np.where(hit, t, np.inf), out=depth)
    return depth.reshape(h, w)


def step_sizes(t: np.ndarray, z_ref: float, ref_step: float) -> np.ndarray:
    """Adaptive step: doubles each distance octave past the nearest volume point."""
    ratio = np.maximum(t, z_ref) / z_ref
    return ref_step * np.exp2(np.floor(np.log2(ratio)))


def march_reference_distance(volumes: list[VolumeInstance], camera: Camera) -> float:
    """Octave reference: nearest eye-to-volume distance, clamped to the near plane."""
    from .camera import point_aabb_distance, transform_aabb

    dists = []
    for vol in volumes:
        lo, hi = transform_aabb(vol.world, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        dists.append(point_aabb_distance(camera.position, lo, hi))
    nearest = min(dists) if dists else 0.0
    return max(nearest, camera.near)


def reference_step(volumes: list[VolumeInstance], settings: RenderSettings) -> float:
    """Base step length: stepFactor times the finest base-level voxel edge in the scene."""
    edges = []
    for vol in volumes:
        lvl = 0 if vol.in_memory or vol.lookup is None else vol.lookup.base_level
        edges.append(world_voxel_edge(vol.world, vol.meta, lvl))
    return settings.step_factor * min(edges)


def render_frame(
    volumes: list[VolumeInstance],
    meshes: list[MeshInstance],
    camera: Camera,
    tex: CacheTexture | None,
    settings: RenderSettings,
    frame_id: int = 0,
) -> tuple[FrameBuffer, FrameStats]:
    """Render one frame; always completes, missing data just leaves gaps.

    Per-frame inputs (lookup grids, cache texture contents) must not mutate
    during the call; pixels are mutually independent.
    """
    t_begin = time.perf_counter()
    h, w = camera.height, camera.width
    n = h * w
    stats = FrameStats(frame_id=frame_id, rays=n)

    depth = rasterize_depth(meshes, camera)
    t_scene = depth.reshape(-1)

    order = sorted(range(len(volumes)), key=lambda i: volumes[i].meta.volume_id)
    vols = [volumes[i] for i in order]
    accum = np.zeros((n, 4))

    if vols:
        dirs = camera.ray_directions().reshape(-1, 3)
        origin = camera.position
        spans = []
        for vol in vols:
            span = intersect_volume(origin, dirs, vol.world)
            spans.append(span)
        t_enter = np.full(n, np.inf)
        t_exit = np.full(n, -np.inf)
        for span in spans:
            if span is None:
                continue
            t0, t1 = span
            valid = t1 > t0
            t_enter = np.where(valid, np.minimum(t_enter, t0), t_enter)
            t_exit = np.where(valid, np.maximum(t_exit, t1), t_exit)
        t_stop = np.minimum(t_exit, t_scene)
        t = np.maximum(t_enter, 0.0)
        active = t < t_stop

        ref = reference_step(vols, settings)
        z_ref = march_reference_distance(vols, camera)
        inv_worlds = []
        for vol in vols:
            try:
                inv_worlds.append(np.linalg.inv(vol.world))
            except np.linalg.LinAlgError:
                inv_worlds.append(None)

        while active.any():
            idx = np.flatnonzero(active)
            ti = t[idx]
            dt = step_sizes(ti, z_ref, ref)
            pos = origin + ti[:, None] * dirs[idx]
            stats.steps += idx.size
            for vol, inv in zip(vols, inv_worlds):
                if inv is None:
                    continue
                local = pos @ inv[:3, :3].T + inv[:3, 3]
                inside = ((local >= 0.0) & (local <= 1.0)).all(axis=1)
                if not inside.any():
                    continue
                ins = np.flatnonzero(inside)
                vals, present = sample_volume(vol, tex, local[ins])
                stats.absent_samples += int(ins.size - present.sum())
                hit = np.flatnonzero(present)
                if hit.size == 0:
                    continue
                stats.taken_samples += hit.size
                rgba = vol.transfer(vals[hit])
                rows = idx[ins[hit]]
                a_corr = 1.0 - (1.0 - rgba[:, 3]) ** (dt[ins[hit]] / ref)
                weight = (1.0 - accum[rows, 3]) * a_corr
                accum[rows, 0] += weight * rgba[:, 0]
                accum[rows, 1] += weight * rgba[:, 1]
                accum[rows, 2] += weight * rgba[:, 2]
                accum[rows, 3] += weight
            t[idx] = ti + dt
            active[idx] = (t[idx] < t_stop[idx]) & (accum[idx, 3] < settings.alpha_threshold)

    bg = np.asarray(settings.background, dtype=np.float64)
    rest = (1.0 - accum[:, 3])[:, None]
    out = np.empty((n, 4))
    out[:, :3] = accum[:, :3] + rest * bg[:3]
    out[:, 3] = accum[:, 3] + rest[:, 0] * bg[3]
    color = np.floor(np.clip(out, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)

    fb = FrameBuffer(color=color.reshape(h, w, 4), depth=depth)
    stats.render_seconds = time.perf_counter() - t_begin
    return fb, stats


def write_png(fb: FrameBuffer, path) -> None:
    """8-bit RGBA PNG output for offline rendering; byte-stable across runs."""
    from PIL import Image

    Image.fromarray(fb.color, mode="RGBA").save(path, format="PNG")
