"""Pinhole cameras, rays and projection.

Conventions (used everywhere, asserted in tests):
  - right-handed world frame, camera looks down +z in its own frame;
  - pixel (i, j) covers the unit square whose center is the continuous
    coordinate (i + 0.5, j + 0.5), with u horizontal (column) and v
    vertical (row).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(Exception):
    pass


class BehindCameraError(GeometryError):
    pass


@dataclass
class Camera:
    """Pinhole camera with zero skew.

    ``world_to_camera`` is (R, t): x_cam = R @ x_world + t.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3,3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6) or \
                not np.isclose(np.linalg.det(self.rotation), 1.0, atol=1e-6):
            raise GeometryError("rotation must be orthonormal with det +1")

    def to_camera(self, x_world):
        x_world = np.asarray(x_world, dtype=np.float64)
        return x_world @ self.rotation.T + self.translation

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit
    t_near: float
    t_far: float
    miss: bool = False

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if not self.miss:
            n = np.linalg.norm(self.direction)
            if abs(n - 1.0) > 1e-9:
                raise GeometryError(f"ray direction not unit (|d|={n})")
            if not (0 <= self.t_near < self.t_far):
                raise GeometryError(f"bad ray bounds ({self.t_near}, {self.t_far})")


def project(camera: Camera, x_world):
    """Project world points to continuous pixel coordinates.

    Accepts a single (3,) point or an (N,3) batch; raises BehindCameraError
    if any point has camera-frame depth <= 1e-9.
    """
    x = np.asarray(x_world, dtype=np.float64)
    single = x.ndim == 1
    xc = camera.to_camera(np.atleast_2d(x))
    z = xc[:, 2]
    if np.any(z <= 1e-9):
        raise BehindCameraError("point behind camera")
    uv = np.stack([camera.fx * xc[:, 0] / z + camera.cx,
                   camera.fy * xc[:, 1] / z + camera.cy], axis=1)
    return uv[0] if single else uv


def unproject(camera: Camera, uv, depth):
    """World point at pixel coordinate uv and camera-frame depth."""
    uv = np.asarray(uv, dtype=np.float64)
    xc = np.array([(uv[0] - camera.cx) / camera.fx * depth,
                   (uv[1] - camera.cy) / camera.fy * depth,
                   depth])
    return camera.rotation.T @ (xc - camera.translation)


def ray_aabb(origin, direction, aabb_lo, aabb_hi):
    """Slab-method ray/AABB intersection -> (t0, t1) or None on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (aabb_lo - origin) * inv
        t1 = (aabb_hi - origin) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # axis-parallel rays outside the slab never hit
    par = direction == 0.0
    if np.any(par & ((origin < aabb_lo) | (origin > aabb_hi))):
        return None
    lo = lo[~par] if np.any(par) else lo
    hi = hi[~par] if np.any(par) else hi
    t_near = lo.max() if lo.size else 0.0
    t_far = hi.min() if hi.size else np.inf
    if t_near > t_far or t_far <= 0:
        return None
    return max(t_near, 0.0), t_far


def pixel_ray_direction(camera: Camera, pixels):
    """Unit world-space directions through pixel centers; pixels (N,2) of (i,j)."""
    px = np.asarray(pixels, dtype=np.float64)
    u = px[:, 0] + 0.5
    v = px[:, 1] + 0.5
    d_cam = np.stack([(u - camera.cx) / camera.fx,
                      (v - camera.cy) / camera.fy,
                      np.ones_like(u)], axis=1)
    d_world = d_cam @ camera.rotation
    return d_world / np.linalg.norm(d_world, axis=1, keepdims=True)


def generate_rays(camera: Camera, pixels, aabb) -> list:
    """Rays through pixel centers with slab-method bounds against ``aabb``.

    ``aabb`` is (lo, hi). Bounds are clipped to t >= 1e-4; rays that miss
    the box come back flagged (miss=True) and render as background.
    """
    lo, hi = (np.asarray(a, dtype=np.float64) for a in aabb)
    if np.any(hi <= lo):
        raise GeometryError("degenerate AABB")
    origin = camera.center
    dirs = pixel_ray_direction(camera, pixels)
    rays = []
    for d in dirs:
        hit = ray_aabb(origin, d, lo, hi)
        if hit is None or hit[1] <= 1e-4:
            rays.append(Ray(origin, d, 0.0, 1.0, miss=True))
        else:
            rays.append(Ray(origin, d, max(hit[0], 1e-4), hit[1]))
    return rays


def look_at_camera(eye, target, up, fx, fy, cx, cy, width, height) -> Camera:
    """Camera at ``eye`` looking toward ``target`` (+z forward, v axis ~ -up)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ eye
    return Camera(fx, fy, cx, cy, width, height, R, t)
