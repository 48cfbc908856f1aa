"""Minimal scene graph with typed node properties and hash-based change tracking.

Every property value has a canonical little-endian byte form; a 64-bit FNV-1a
hash over (type tag, canonical bytes) decides whether a value changed since
the last collection. Floats hash by their raw IEEE-754 bits, so -0.0 and 0.0
are different values on purpose. :func:`Scene.collect_changes` emits exactly
the properties whose hash moved; applying those entries to a replica scene
(creating unknown nodes lazily) reproduces the master's replication-visible
state, byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF

TAG_IDS = {
    "Int32": 1,
    "Int64": 2,
    "Float32": 3,
    "Vec3F": 4,
    "Vec4F": 5,
    "Mat4F": 6,
    "Bool": 7,
    "String": 8,
}
TAG_NAMES = {v: k for k, v in TAG_IDS.items()}

NODE_KINDS = ("group", "volume", "mesh", "camera")


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _U64
    return h


class TypedValue:
    """Tagged union of the supported property types with canonical serialization."""

    __slots__ = ("tag", "value")

    def __init__(self, tag: str, value):
        if tag not in TAG_IDS:
            raise ValueError(f"unknown type tag {tag!r}")
        self.tag = tag
        self.value = self._normalize(tag, value)

    @staticmethod
    def _normalize(tag, value):
        if tag == "Int32":
            v = int(value)
            struct.pack("<i", v)
            return v
        if tag == "Int64":
            v = int(value)
            struct.pack("<q", v)
            return v
        if tag == "Float32":
            return float(np.float32(value))
        if tag == "Vec3F":
            return tuple(float(np.float32(x)) for x in value)
        if tag == "Vec4F":
            return tuple(float(np.float32(x)) for x in value)
        if tag == "Mat4F":
            arr = np.asarray(value, dtype=np.float32).reshape(16)
            return tuple(float(x) for x in arr)
        if tag == "Bool":
            return bool(value)
        if tag == "String":
            return str(value)
        raise AssertionError(tag)

    def canonical_bytes(self) -> bytes:
        t, v = self.tag, self.value
        if t == "Int32":
            return struct.pack("<i", v)
        if t == "Int64":
            return struct.pack("<q", v)
        if t == "Float32":
            return struct.pack("<f", v)
        if t == "Vec3F":
            if len(v) != 3:
                raise ValueError("Vec3F needs 3 components")
            return struct.pack("<3f", *v)
        if t == "Vec4F":
            if len(v) != 4:
                raise ValueError("Vec4F needs 4 components")
            return struct.pack("<4f", *v)
        if t == "Mat4F":
            return struct.pack("<16f", *v)  # row-major
        if t == "Bool":
            return b"\x01" if v else b"\x00"
        if t == "String":
            return v.encode("utf-8")
        raise AssertionError(t)

    @classmethod
    def from_bytes(cls, tag_id: int, data: bytes) -> "TypedValue":
        tag = TAG_NAMES.get(tag_id)
        if tag is None:
            raise ValueError(f"unknown type tag id {tag_id}")
        if tag == "Int32":
            return cls(tag, struct.unpack("<i", data)[0])
        if tag == "Int64":
            return cls(tag, struct.unpack("<q", data)[0])
        if tag == "Float32":
            return cls(tag, struct.unpack("<f", data)[0])
        if tag == "Vec3F":
            return cls(tag, struct.unpack("<3f", data))
        if tag == "Vec4F":
            return cls(tag, struct.unpack("<4f", data))
        if tag == "Mat4F":
            return cls(tag, struct.unpack("<16f", data))
        if tag == "Bool":
            if data not in (b"\x00", b"\x01"):
                raise ValueError("bad Bool encoding")
            return cls(tag, data == b"\x01")
        if tag == "String":
            return cls(tag, data.decode("utf-8"))
        raise AssertionError(tag)

    def __eq__(self, other):
        return (
            isinstance(other, TypedValue)
            and self.tag == other.tag
            and self.canonical_bytes() == other.canonical_bytes()
        )

    def __hash__(self):
        return hash((self.tag, self.canonical_bytes()))

    def __repr__(self):
        return f"TypedValue({self.tag}, {self.value!r})"


def hash_value(v: TypedValue) -> int:
    """64-bit FNV-1a over the type tag byte followed by the canonical bytes."""
    return fnv1a64(v.canonical_bytes(), fnv1a64(bytes([TAG_IDS[v.tag]])))


class PropertyTable:
    """Named typed values plus the hash seen at the last change collection."""

    def __init__(self):
        self.entries: dict[str, TypedValue] = {}
        self.last_hashes: dict[str, int] = {}

    def set(self, name: str, value: TypedValue) -> None:
        if not isinstance(value, TypedValue):
            raise TypeError("property values must be TypedValue")
        self.entries[name] = value

    def get(self, name: str) -> TypedValue | None:
        return self.entries.get(name)


@dataclass
class SceneNode:
    id: int
    name: str = ""
    parent_id: int | None = None
    kind: str = "group"
    local_transform: np.ndarray = dc_field(default_factory=lambda: np.eye(4))
    properties: PropertyTable = dc_field(default_factory=PropertyTable)
    payload: dict = dc_field(default_factory=dict)  # volume/mesh descriptors from scene files

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise ValueError(f"unknown node kind {self.kind!r}")
        self.local_transform = np.asarray(self.local_transform, dtype=np.float64).reshape(4, 4)


@dataclass
class ChangeEntry:
    node_id: int
    name: str
    value: TypedValue


Changeset = list  # of ChangeEntry


class Scene:
    """A forest of nodes; mutation and change collection belong to one owner context."""

    def __init__(self):
        self.nodes: dict[int, SceneNode] = {}
        self.apply_errors = 0

    def add(self, node: SceneNode) -> SceneNode:
        if node.id in self.nodes:
            raise ValueError(f"duplicate node id {node.id}")
        if node.parent_id is not None and node.parent_id not in self.nodes:
            raise ValueError(f"parent {node.parent_id} does not exist")
        self.nodes[node.id] = node
        return node

    def node(self, node_id: int) -> SceneNode:
        n = self.nodes.get(node_id)
        if n is None:
            raise KeyError(f"no node {node_id}")
        return n

    def world_transform(self, node_id: int) -> np.ndarray:
        """Product of ancestor local transforms, root first."""
        chain = []
        seen = set()
        cur: int | None = node_id
        while cur is not None:
            if cur in seen:
                raise ValueError(f"parent cycle at node {cur}")
            seen.add(cur)
            node = self.node(cur)
            chain.append(node.local_transform)
            cur = node.parent_id
        out = np.eye(4)
        for m in reversed(chain):  # root first: world = M_root @ ... @ M_node
            out = out @ m
        return out

    def set_property(self, node_id: int, name: str, value: TypedValue) -> None:
        self.node(node_id).properties.set(name, value)

    def collect_changes(self) -> Changeset:
        """Entries for every property whose hash moved since the last collection."""
        out: Changeset = []
        for node_id in sorted(self.nodes):
            table = self.nodes[node_id].properties
            for name in sorted(table.entries):
                h = hash_value(table.entries[name])
                if table.last_hashes.get(name) != h:
                    out.append(ChangeEntry(node_id, name, table.entries[name]))
                    table.last_hashes[name] = h
        return out

    def apply_changeset(self, changes: Changeset) -> int:
        """Upsert entries (creating unknown nodes as groups); returns applied count.

        Malformed entries are skipped and counted in ``apply_errors``.
        Idempotent: applying the same changeset twice leaves the same state.
        """
        applied = 0
        for entry in changes:
            try:
                if not isinstance(entry.value, TypedValue):
                    raise TypeError("entry value must be TypedValue")
                node = self.nodes.get(entry.node_id)
                if node is None:
                    node = SceneNode(id=int(entry.node_id))
                    self.nodes[node.id] = node
                node.properties.set(str(entry.name), entry.value)
                applied += 1
            except Exception:
                self.apply_errors += 1
        return applied

    def canonical_state(self) -> bytes:
        """Replication-visible state: property-bearing node ids and their tables, sorted.

        Nodes without properties carry no replicable state and are skipped, so
        a replica fed purely by changesets can reach byte equality.
        """
        with_props = [nid for nid in sorted(self.nodes) if self.nodes[nid].properties.entries]
        parts = [struct.pack("<I", len(with_props))]
        for node_id in with_props:
            table = self.nodes[node_id].properties
            parts.append(struct.pack("<QI", node_id, len(table.entries)))
            for name in sorted(table.entries):
                nb = name.encode("utf-8")
                value = table.entries[name]
                vb = value.canonical_bytes()
                parts.append(struct.pack("<H", len(nb)))
                parts.append(nb)
                parts.append(bytes([TAG_IDS[value.tag]]))
                parts.append(struct.pack("<I", len(vb)))
                parts.append(vb)
        return b"".join(parts)


def load_scene_file(path: str | Path) -> Scene:
    """Scene description JSON: a list of node objects.

    Keys per node: ``id``, optional ``name``, ``parent``, ``kind`` (group |
    volume | mesh | camera), ``transform`` (16 numbers, row-major), and a
    ``volume`` or ``mesh`` payload. Volume payloads carry ``pyramidPath`` or
    ``procedural`` plus ``transferFunction`` ([[value, r, g, b, a], ...]).
    """
    doc = json.loads(Path(path).read_text())
    nodes = doc["nodes"] if isinstance(doc, dict) else doc
    scene = Scene()
    for raw in nodes:
        transform = np.array(raw.get("transform", np.eye(4).reshape(16).tolist()), dtype=np.float64)
        node = SceneNode(
            id=int(raw["id"]),
            name=raw.get("name", ""),
            parent_id=raw.get("parent"),
            kind=raw.get("kind", "group"),
            local_transform=transform.reshape(4, 4),
        )
        for key in ("volume", "mesh", "camera"):
            if key in raw:
                node.payload[key] = raw[key]
        scene.nodes[node.id] = node
    for node in scene.nodes.values():  # parents may appear later in the file
        if node.parent_id is not None and node.parent_id not in scene.nodes:
            raise ValueError(f"node {node.id} references missing parent {node.parent_id}")
    return scene
