"""Frame-stepping glue: turns a scene description into volume/mesh instances,
owns the caches and load queue, and advances one frame per tick.

Tick order is fixed so every frame samples an immutable cache snapshot:
build the lookup grids (marking resident blocks used and enqueueing misses),
drain the load queue at the frame boundary, then render. Blocks uploaded this
tick become visible to lookup grids built next tick.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cache import CacheStats, CacheTexture, CpuBlockCache, LoadQueue, process_loads
from .camera import Camera, look_at_quat, transform_aabb
from .lookup import ResolutionPolicy, build_lookup
from .pyramid import (
    PROCEDURAL_FIELDS,
    ArraySource,
    BlockKey,
    BlockSource,
    FilePyramid,
    ProceduralSource,
    VolumeMeta,
    build_levels,
)
from .render import (
    FrameBuffer,
    FrameStats,
    MeshInstance,
    RenderSettings,
    TransferFunction,
    VolumeInstance,
    render_frame,
)
from .scene import Scene, load_scene_file

log = logging.getLogger(__name__)

IN_MEMORY_VOXEL_LIMIT = 256**3  # larger volumes must go through the cache

DEFAULT_TRANSFER = [[0.0, 0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0, 1.0]]


def _source_from_payload(desc: dict, scene_dir) -> BlockSource:
    if "pyramidPath" in desc:
        path = scene_dir / desc["pyramidPath"] if scene_dir else desc["pyramidPath"]
        return FilePyramid(path)
    if "procedural" in desc:
        p = desc["procedural"]
        field_name = p.get("field", "sphere")
        if field_name not in PROCEDURAL_FIELDS:
            raise ValueError(f"unknown procedural field {field_name!r}")
        meta = VolumeMeta(
            volume_id=p.get("volumeId", f"procedural-{field_name}"),
            dims=tuple(p["dims"]),
            voxel_type=p.get("voxelType", "u8"),
            voxel_size=tuple(p.get("voxelSize", (1.0, 1.0, 1.0))),
            block_size=p.get("blockSize", 32),
        )
        return ProceduralSource(meta, PROCEDURAL_FIELDS[field_name])
    raise ValueError("volume payload needs pyramidPath or procedural")


@dataclass
class EngineConfig:
    cache_slots: int = 512
    cpu_cache_blocks: int = 512
    load_budget: int = 0  # 0 = unlimited: drain the whole queue each frame
    loader_workers: int = 0
    width: int = 256
    height: int = 256


class Engine:
    """Owns scene instances, caches, and the per-frame pipeline."""

    def __init__(
        self,
        scene: Scene,
        config: EngineConfig | None = None,
        settings: RenderSettings | None = None,
        policy: ResolutionPolicy | None = None,
        scene_dir=None,
    ):
        self.scene = scene
        self.config = config or EngineConfig()
        self.settings = settings or RenderSettings()
        self.policy = policy or ResolutionPolicy()
        self.volumes: list[VolumeInstance] = []
        self.meshes: list[MeshInstance] = []
        self.sources: dict[str, BlockSource] = {}
        self.camera: Camera | None = None
        self._node_of_volume: dict[str, int] = {}
        self._node_of_mesh: list[tuple[int, MeshInstance]] = []

        block_sizes = set()
        dtypes = []
        for node_id in sorted(scene.nodes):
            node = scene.nodes[node_id]
            if "volume" in node.payload:
                desc = node.payload["volume"]
                source = _source_from_payload(desc, scene_dir)
                meta = source.meta
                tf = TransferFunction(
                    [(p[0], tuple(p[1:5])) for p in desc.get("transferFunction", DEFAULT_TRANSFER)]
                )
                world = scene.world_transform(node_id)
                vol = VolumeInstance(meta=meta, world=world, transfer=tf, source=source)
                if desc.get("inMemory"):
                    nvox = meta.dims[0] * meta.dims[1] * meta.dims[2]
                    if nvox > IN_MEMORY_VOXEL_LIMIT:
                        raise ValueError(f"volume {meta.volume_id} too large for inMemory")
                    vol.level0 = _materialize_level0(source)
                else:
                    block_sizes.add(meta.block_size)
                    dtypes.append(meta.dtype)
                    self.sources[meta.volume_id] = source
                if meta.volume_id in self._node_of_volume:
                    raise ValueError(f"duplicate volume id {meta.volume_id}")
                self._node_of_volume[meta.volume_id] = node_id
                self.volumes.append(vol)
            if "mesh" in node.payload:
                desc = node.payload["mesh"]
                mesh = MeshInstance(
                    positions=np.asarray(desc["positions"], dtype=np.float64).reshape(-1, 3),
                    indices=np.asarray(desc["indices"], dtype=np.int64).reshape(-1, 3),
                    world=scene.world_transform(node_id),
                )
                self.meshes.append(mesh)
                self._node_of_mesh.append((node_id, mesh))
            if node.kind == "camera" or "camera" in node.payload:
                self.camera = _camera_from_node(node, scene, self.config)

        if len(block_sizes) > 1:
            raise ValueError(f"out-of-core volumes must share one block size, got {block_sizes}")
        block = block_sizes.pop() if block_sizes else 32
        dtype = np.uint16 if any(d.itemsize == 2 for d in dtypes) else np.uint8
        self.tex = CacheTexture.for_slots(self.config.cache_slots, block, dtype)
        self.cpu = CpuBlockCache(self.config.cpu_cache_blocks)
        self.queue = LoadQueue()
        self._evictions_seen = 0
        if self.camera is None:
            self.camera = self.default_camera()

    def default_camera(self) -> Camera:
        """Frame the union AABB of all instances from +z."""
        los, his = [], []
        for vol in self.volumes:
            lo, hi = transform_aabb(vol.world, (0, 0, 0), (1, 1, 1))
            los.append(lo)
            his.append(hi)
        for mesh in self.meshes:
            lo, hi = transform_aabb(mesh.world, mesh.positions.min(axis=0), mesh.positions.max(axis=0))
            los.append(lo)
            his.append(hi)
        if not los:
            lo, hi = np.zeros(3), np.ones(3)
        else:
            lo, hi = np.min(los, axis=0), np.max(his, axis=0)
        center = (lo + hi) / 2.0
        size = float(np.max(hi - lo))
        eye = center + np.array([0.0, 0.0, 1.6 * size + 0.5 * size])
        return Camera.looking_at(
            eye, center, width=self.config.width, height=self.config.height,
            near=max(0.01 * size, 1e-3), far=10.0 * size + 10.0,
        )

    def refresh_transforms(self) -> None:
        """Pull node transforms into the render instances (cheap; scenes are small)."""
        for vol in self.volumes:
            node_id = self._node_of_volume.get(vol.meta.volume_id)
            if node_id is not None:
                vol.world = self.scene.world_transform(node_id)
        for node_id, mesh in self._node_of_mesh:
            mesh.world = self.scene.world_transform(node_id)

    def step(self, frame_id: int, camera: Camera | None = None) -> tuple[FrameBuffer, FrameStats, CacheStats]:
        """One frame: build lookups, drain loads, render."""
        cam = camera or self.camera
        self.refresh_transforms()
        used = 0
        for vol in self.volumes:
            if vol.in_memory:
                continue
            vol.lookup, _reqs = build_lookup(
                vol.meta, vol.world, cam, self.tex, self.queue, self.policy, frame_id
            )
            used += vol.lookup.marked_used
        cstats = CacheStats()
        budget = self.config.load_budget or 2**31
        process_loads(
            self.queue, self.sources, self.cpu, self.tex, budget, frame_id,
            stats=cstats, workers=self.config.loader_workers,
        )
        fb, fstats = render_frame(self.volumes, self.meshes, cam, self.tex, self.settings, frame_id)
        fstats.used_blocks = used
        cstats.evictions = self.tex.evictions - self._evictions_seen  # this frame only
        self._evictions_seen = self.tex.evictions
        return fb, fstats, cstats

    def resident_bytes(self) -> int:
        """Bytes pinned by the cache tiers right now."""
        return int(self.tex.data.nbytes) + int(self.cpu.payload_bytes)


def _materialize_level0(source: BlockSource) -> np.ndarray:
    """Assemble the full level-0 array of a small volume from its blocks."""
    meta = source.meta
    if isinstance(source, ArraySource):
        return source.levels[0]
    dx, dy, dz = meta.dims
    out = np.zeros((dz, dy, dx), dtype=meta.dtype)
    b = meta.block_size
    gx, gy, gz = meta.grid_dims(0)
    for bz in range(gz):
        for by in range(gy):
            for bx in range(gx):
                data = source.read(BlockKey(meta.volume_id, 0, bx, by, bz))
                core = data.payload[1 : b + 1, 1 : b + 1, 1 : b + 1]
                x0, y0, z0 = bx * b, by * b, bz * b
                sx, sy, sz = min(b, dx - x0), min(b, dy - y0), min(b, dz - z0)
                out[z0 : z0 + sz, y0 : y0 + sy, x0 : x0 + sx] = core[:sz, :sy, :sx]
    return out


def _camera_from_node(node, scene: Scene, config: EngineConfig) -> Camera:
    desc = node.payload.get("camera", {})
    world = scene.world_transform(node.id)
    pos = desc.get("position")
    if pos is None:
        pos = world[:3, 3]
    target = desc.get("target")
    fov = float(desc.get("fovY", np.radians(50.0)))
    kw = dict(
        fov_y=fov,
        near=float(desc.get("near", 0.05)),
        far=float(desc.get("far", 100.0)),
        width=config.width,
        height=config.height,
    )
    if target is not None:
        return Camera.looking_at(pos, target, **kw)
    quat = desc.get("quat", (0.0, 0.0, 0.0, 1.0))
    return Camera(np.asarray(pos, dtype=np.float64), np.asarray(quat, dtype=np.float64), **kw)


def engine_from_file(path, config: EngineConfig | None = None, **kw) -> Engine:
    from pathlib import Path

    p = Path(path)
    scene = load_scene_file(p)
    return Engine(scene, config=config, scene_dir=p.parent, **kw)
