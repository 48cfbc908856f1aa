"""Perspective camera, primary rays, frustum planes, and AABB helpers.

Orientation is a unit quaternion ``(x, y, z, w)`` rotating camera-local axes
into world space; the camera looks along local -z with +y up.

Ray parameterization: primary-ray directions are scaled so their
camera-forward component equals 1, making the ray parameter ``t`` the
world-space depth along the view axis. A fronto-parallel plane at distance
``d`` therefore has ``t = d`` at every pixel, and ``near``/``far`` bound
``t`` directly. All depth values in the renderer use this convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    """3x3 rotation matrix for a unit quaternion (x, y, z, w)."""
    x, y, z, w = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) for a 3x3 rotation matrix."""
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        return quat_normalize(
            [(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s]
        )
    i = int(np.argmax(np.diag(m)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = math.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2
    q = np.empty(4)
    q[i] = 0.25 * s
    q[j] = (m[j, i] + m[i, j]) / s
    q[k] = (m[k, i] + m[i, k]) / s
    q[3] = (m[k, j] - m[j, k]) / s
    return quat_normalize(q)


def look_at_quat(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Orientation looking from ``eye`` toward ``target`` with +y-ish up."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n == 0:
        raise ValueError("eye and target coincide")
    fwd /= n
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(right)
    if rn < 1e-12:  # looking straight along up: pick an arbitrary right
        right = np.cross(fwd, (1.0, 0.0, 0.0))
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            right = np.cross(fwd, (0.0, 0.0, 1.0))
            rn = np.linalg.norm(right)
    right /= rn
    upv = np.cross(right, fwd)
    m = np.column_stack([right, upv, -fwd])  # camera local x, y, z in world
    return matrix_to_quat(m)


@dataclass
class Camera:
    """Perspective camera with a pixel viewport."""

    position: np.ndarray
    orientation: np.ndarray  # quaternion (x, y, z, w)
    fov_y: float = math.radians(50.0)
    near: float = 0.05
    far: float = 100.0
    width: int = 256
    height: int = 256

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.orientation = quat_normalize(self.orientation)
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")
        if not 0 < self.fov_y < math.pi:
            raise ValueError(f"fov_y out of (0, pi): {self.fov_y}")

    @classmethod
    def looking_at(cls, eye, target, up=(0.0, 1.0, 0.0), **kw) -> "Camera":
        return cls(np.asarray(eye, dtype=np.float64), look_at_quat(eye, target, up), **kw)

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def view_matrix(self) -> np.ndarray:
        r = self.rotation()
        v = np.eye(4)
        v[:3, :3] = r.T
        v[:3, 3] = -r.T @ self.position
        return v

    def projection_matrix(self) -> np.ndarray:
        aspect = self.width / self.height
        f = 1.0 / math.tan(self.fov_y / 2.0)
        n, fa = self.near, self.far
        p = np.zeros((4, 4))
        p[0, 0] = f / aspect
        p[1, 1] = f
        p[2, 2] = (fa + n) / (n - fa)
        p[2, 3] = 2 * fa * n / (n - fa)
        p[3, 2] = -1.0
        return p

    def focal_px(self) -> float:
        """Focal length expressed in pixels of viewport height."""
        return self.height / (2.0 * math.tan(self.fov_y / 2.0))

    def ray_directions(self) -> np.ndarray:
        """World-space directions for all pixels, shape (height, width, 3).

        Pixel centers, top-left origin: row 0 is the top of the image.
        Directions have camera-forward component 1 (see module docstring), so
        the ray parameter is view-axis depth in world units.
        """
        w, h = self.width, self.height
        tanf = math.tan(self.fov_y / 2.0)
        aspect = w / h
        xs = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * tanf * aspect
        ys = (1.0 - (np.arange(h) + 0.5) / h * 2.0) * tanf
        dirs = np.empty((h, w, 3))
        dirs[..., 0] = xs[None, :]
        dirs[..., 1] = ys[:, None]
        dirs[..., 2] = -1.0
        return dirs @ self.rotation().T

    def frustum_planes(self) -> np.ndarray:
        """Six world-space planes (a,b,c,d), inward: dot(plane, (p,1)) >= 0 inside."""
        m = self.projection_matrix() @ self.view_matrix()
        planes = np.array(
            [
                m[3] + m[0],  # left
                m[3] - m[0],  # right
                m[3] + m[1],  # bottom
                m[3] - m[1],  # top
                m[3] + m[2],  # near
                m[3] - m[2],  # far
            ]
        )
        norms = np.linalg.norm(planes[:, :3], axis=1, keepdims=True)
        return planes / norms


def transform_points(mat4: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a 4x4 affine to points of shape (..., 3)."""
    return pts @ mat4[:3, :3].T + mat4[:3, 3]


def transform_aabb(mat4: np.ndarray, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """World-space AABB of a transformed box."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    w = transform_points(mat4, corners)
    return w.min(axis=0), w.max(axis=0)


def aabb_in_frustum(planes: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> bool:
    """Conservative test: False only if the box is fully outside some plane."""
    for a, b, c, d in planes:
        # positive vertex: the box corner furthest along the plane normal
        px = hi[0] if a >= 0 else lo[0]
        py = hi[1] if b >= 0 else lo[1]
        pz = hi[2] if c >= 0 else lo[2]
        if a * px + b * py + c * pz + d < 0:
            return False
    return True


def aabbs_in_frustum(planes: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Vectorized :func:`aabb_in_frustum` for (N,3) arrays of boxes."""
    inside = np.ones(lo.shape[0], dtype=bool)
    for a, b, c, d in planes:
        px = np.where(a >= 0, hi[:, 0], lo[:, 0])
        py = np.where(b >= 0, hi[:, 1], lo[:, 1])
        pz = np.where(c >= 0, hi[:, 2], lo[:, 2])
        inside &= a * px + b * py + c * pz + d >= 0
    return inside


def point_aabb_distance(point: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    """Distance from a point to the nearest point of a box (0 inside)."""
    d = np.maximum(np.maximum(lo - point, 0.0), point - hi)
    return float(np.linalg.norm(d))


def ray_box_ts(origin: np.ndarray, dirs: np.ndarray, inv_mat4: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Slab intersection of rays with an affinely placed unit cube [0,1]^3.

    ``dirs`` has shape (N, 3); the returned entry/exit parameters are along the
    *world* ray parameterization (directions are transformed without
    renormalizing). Misses yield entry > exit; entry is clamped to >= 0.
    """
    o = inv_mat4[:3, :3] @ origin + inv_mat4[:3, 3]
    d = dirs @ inv_mat4[:3, :3].T
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (0.0 - o) / d
        t_hi = (1.0 - o) / d
    near = np.minimum(t_lo, t_hi)
    far = np.maximum(t_lo, t_hi)
    # Axis-parallel rays: inside the slab -> no constraint, outside -> miss.
    par = d == 0.0
    if par.any():
        inside = (o >= 0.0) & (o <= 1.0)
        near = np.where(par, np.where(inside, -np.inf, np.inf), near)
        far = np.where(par, np.where(inside, np.inf, -np.inf), far)
    t0 = np.maximum(near.max(axis=-1), 0.0)
    t1 = far.min(axis=-1)
    return t0, t1
