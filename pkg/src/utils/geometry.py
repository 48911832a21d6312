"""
Camera and ray geometry.

Conventions used repo-wide: the camera looks down +z of its own frame, pixel
``(u, v)`` has u pointing right and v pointing down, and ``pose`` is the
camera-to-world rigid transform. Continuous pixel coordinates put the centre of
the array element ``[row, col]`` at ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple

import numpy as np

from errors import DomainError


PARALLEL_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class Ray:
    """
    Half-line ``o + t v`` with unit direction.

    Attributes:
        origin (np.ndarray): ray origin, shape (3,)
        direction (np.ndarray): unit direction, shape (3,)
    """
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        v = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(o)) and np.all(np.isfinite(v))):
            raise DomainError(f"ray components must be finite: o={o}, v={v}")
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise DomainError("ray direction must be nonzero")
        object.__setattr__(self, 'origin', o)
        object.__setattr__(self, 'direction', v / norm)

    def at(self, t: float) -> np.ndarray:
        """Point at distance ``t`` along the ray."""
        return self.origin + t * self.direction


@dataclass
class CameraModel:
    """
    Pinhole camera with intrinsics in pixels and a camera-to-world pose.

    Attributes:
        fx, fy (float): focal lengths in pixels
        cx, cy (float): principal point in pixels
        width, height (int): image size in pixels
        pose (np.ndarray): 4x4 camera-to-world rigid transform
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise DomainError(f"image size must be positive, got {self.width}x{self.height}")
        if not np.all(np.isfinite(self.pose)):
            raise DomainError("camera pose contains non-finite values")
        rotation = self.pose[:3, :3]
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-6):
            raise DomainError("camera rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-6:
            raise DomainError("camera rotation must have determinant +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return self.pose[:3, 3].copy()

    @property
    def intrinsics(self) -> np.ndarray:
        """3x3 calibration matrix K."""
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def contains(self, u: float, v: float) -> bool:
        return 0.0 <= u < self.width and 0.0 <= v < self.height


class IntersectionStatus(Enum):
    """Outcome of intersecting two rays."""
    OK = 'ok'
    BEHIND = 'behind'
    PARALLEL = 'parallel'


@dataclass(frozen=True, eq=False)
class RayPairIntersection:
    """
    Closest approach of two rays.

    Attributes:
        midpoint (np.ndarray): midpoint of the common perpendicular
        t1, t2 (float): distance along each ray to its closest point
        gap (float): length of the common perpendicular
        status (IntersectionStatus): OK, BEHIND (some t <= 0) or PARALLEL
    """
    midpoint: np.ndarray
    t1: float
    t2: float
    gap: float
    status: IntersectionStatus

    @property
    def valid(self) -> bool:
        return self.status is IntersectionStatus.OK


@dataclass(frozen=True, eq=False)
class Projection:
    """Pinhole projection result; ``behind`` is set when camera-frame depth <= 0."""
    u: float
    v: float
    depth: float
    behind: bool


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from ``eye`` to ``target`` (v axis points down)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise DomainError("look-at direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = eye
    return pose


def pixel_to_ray(cam: CameraModel, pixel: Tuple[float, float]) -> Ray:
    """
    Cast the ray from the camera centre through a (sub-)pixel.

    Args:
        cam: Calibrated camera
        pixel: Continuous pixel coordinates ``(u, v)``

    Returns:
        Ray with origin at the camera centre and unit direction

    Raises:
        DomainError: If the pixel lies outside the image
    """
    u, v = float(pixel[0]), float(pixel[1])
    if not cam.contains(u, v):
        raise DomainError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    origins, directions = pixels_to_rays(cam, np.array([[u, v]]))
    return Ray(origins[0], directions[0])


def pixels_to_rays(cam: CameraModel, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised ray casting.

    Args:
        cam: Calibrated camera
        pixels: (N, 2) continuous pixel coordinates; bounds are not checked

    Returns:
        Tuple of (origins (N, 3), unit directions (N, 3)) in world frame
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    local = np.stack([
        (pixels[:, 0] - cam.cx) / cam.fx,
        (pixels[:, 1] - cam.cy) / cam.fy,
        np.ones(len(pixels)),
    ], axis=-1)
    directions = local @ cam.rotation.T
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.center, directions.shape).copy()
    return origins, directions


def project_point(cam: CameraModel, x) -> Projection:
    """
    Project a world point into the image.

    Points with non-positive camera-frame depth are flagged via ``behind``
    instead of raising; their (u, v) are NaN.
    """
    u, v, depth = project_points(cam, np.asarray(x, dtype=np.float64).reshape(1, 3))
    behind = bool(depth[0] <= 0.0)
    return Projection(float(u[0]), float(v[0]), float(depth[0]), behind)


def project_points(cam: CameraModel, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorised projection.

    Returns:
        Tuple of (u, v, camera-frame depth); u and v are NaN where depth <= 0
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    local = (points - cam.center) @ cam.rotation
    depth = local[:, 2]
    with np.errstate(divide='ignore', invalid='ignore'):
        u = np.where(depth > 0, cam.fx * local[:, 0] / depth + cam.cx, np.nan)
        v = np.where(depth > 0, cam.fy * local[:, 1] / depth + cam.cy, np.nan)
    return u, v, depth


def closest_points_between_rays(r1: Ray, r2: Ray) -> RayPairIntersection:
    """
    Common perpendicular of two lines, used as the triangulated 3D point.

    ``(t1, t2)`` minimise ``|(o1 + t1 v1) - (o2 + t2 v2)|`` over the reals. The
    result is flagged BEHIND when either optimum lies at ``t <= 0`` and PARALLEL
    when ``|1 - (v1.v2)^2| < 1e-12``.
    """
    v1, v2 = r1.direction, r2.direction
    w0 = r1.origin - r2.origin
    a = float(v1 @ v1)
    b = float(v1 @ v2)
    c = float(v2 @ v2)
    d = float(v1 @ w0)
    e = float(v2 @ w0)

    if abs(1.0 - b * b) < PARALLEL_EPS:
        nan = float('nan')
        return RayPairIntersection(
            np.full(3, np.nan), nan, nan, nan, IntersectionStatus.PARALLEL
        )

    denom = a * c - b * b
    t1 = (b * e - c * d) / denom
    t2 = (a * e - b * d) / denom
    p1 = r1.at(t1)
    p2 = r2.at(t2)
    midpoint = (p1 + p2) / 2.0
    gap = float(np.linalg.norm(p1 - p2))
    status = IntersectionStatus.OK if (t1 > 0.0 and t2 > 0.0) else IntersectionStatus.BEHIND
    return RayPairIntersection(midpoint, t1, t2, gap, status)


def ray_box_exit(origins: np.ndarray, directions: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """
    Distance at which rays starting inside an axis-aligned box leave it (slab test).

    Returns:
        (N,) exit distances, 0 for rays whose origin is outside the box
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    with np.errstate(divide='ignore', invalid='ignore'):
        inv = 1.0 / directions
        t_lo = (lo - origins) * inv
        t_hi = (hi - origins) * inv
    t_far = np.where(np.isnan(t_hi), np.inf, np.maximum(t_lo, t_hi))
    t_far = np.where(np.isnan(t_lo), np.inf, t_far)
    exit_t = np.min(t_far, axis=-1)
    return np.clip(np.nan_to_num(exit_t, posinf=0.0), 0.0, None)


@dataclass(frozen=True, eq=False)
class Bounds:
    """
    Axis-aligned scene box used for ray far bounds, Eikonal sampling and meshing.

    Attributes:
        lo (np.ndarray): minimum corner, shape (3,)
        hi (np.ndarray): maximum corner, shape (3,)
    """
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise DomainError(f"bounds must be finite: lo={lo}, hi={hi}")
        if np.any(hi <= lo):
            raise DomainError(f"bounds must have hi > lo on every axis: lo={lo}, hi={hi}")
        object.__setattr__(self, 'lo', lo)
        object.__setattr__(self, 'hi', hi)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((points >= self.lo) & (points <= self.hi), axis=-1)

    def padded(self, margin: float) -> Bounds:
        return Bounds(self.lo - margin, self.hi + margin)

    def to_list(self) -> list:
        return [self.lo.tolist(), self.hi.tolist()]

    @classmethod
    def around(cls, points: np.ndarray, margin: float) -> Bounds:
        """Bounding box of ``points`` padded by ``margin`` on every side."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(points.min(axis=0) - margin, points.max(axis=0) + margin)
