"""voxcache: out-of-core multi-resolution volume rendering with a block cache,
lookup-grid indirection, scene replication, and remote frame streaming."""

__version__ = "0.1.0"
