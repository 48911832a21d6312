"""
Synthetic scene service module.

Builds analytic indoor scenes, renders ground-truth views by sphere tracing,
samples ground-truth surface clouds and produces exact (optionally noisy)
cross-view correspondences. These are the reference data for end-to-end runs
and tests.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import DomainError
from logger import get_logger
from services.sparse_depth_service import Correspondence
from utils.dataModel import Albedo, Primitive, SceneSpec
from utils.geometry import CameraModel, Ray, look_at_pose, pixels_to_rays, project_points


logger = get_logger(__name__)

TRACE_EPS = 1e-5
TRACE_MAX_STEPS = 256
NORMAL_STEP = 1e-5
AMBIENT = 0.2
SURFACE_TOLERANCE = 1e-6
OCCLUSION_TOLERANCE = 0.01


def default_scene() -> SceneSpec:
    """
    Room [-1, 1]^3 with flat walls and ceiling, a checkerboard floor, a table with
    checkerboard sides and a flat top, and a checkered sphere standing on it.
    """
    wall = (0.75, 0.72, 0.68)
    return SceneSpec(
        primitives=[
            Primitive(
                name='room', kind='box', center=(0.0, 0.0, 0.0), half_extents=(1.0, 1.0, 1.0), hollow=True,
                albedo=Albedo('checker_floor', wall, (0.2, 0.2, 0.25), 0.25),
            ),
            Primitive(
                name='table', kind='box', center=(0.25, 0.15, -0.72), half_extents=(0.4, 0.3, 0.32),
                albedo=Albedo('checker_sides', (0.55, 0.4, 0.25), (0.15, 0.1, 0.05), 0.1),
            ),
            Primitive(
                name='ball', kind='sphere', center=(0.25, 0.15, -0.2), radius=0.2,
                albedo=Albedo('checker', (0.85, 0.3, 0.2), (0.2, 0.3, 0.85), 0.1),
            ),
        ],
        light_direction=(0.3, 0.4, 1.0),
    )


def ring_cameras(
    n_views: int = 20,
    width: int = 64,
    height: int = 64,
    radius: float = 0.6,
    heights: Tuple[float, float] = (0.1, 0.3),
    target: Tuple[float, float, float] = (0.0, 0.0, -0.4),
    focal_scale: float = 0.8,
) -> List[CameraModel]:
    """Cameras on a horizontal ring inside the room, all looking at ``target``."""
    cams = []
    for i in range(n_views):
        angle = 2.0 * math.pi * i / n_views
        eye = (radius * math.cos(angle), radius * math.sin(angle), heights[i % len(heights)])
        cams.append(CameraModel(
            fx=focal_scale * width,
            fy=focal_scale * width,
            cx=width / 2.0,
            cy=height / 2.0,
            width=width,
            height=height,
            pose=look_at_pose(eye, target),
        ))
    return cams


def analytic_sdf(scene: SceneSpec, x):
    """Free-space signed distance of the scene; float for one point, array for (N, 3)."""
    x = np.asarray(x, dtype=np.float64)
    values = scene.sdf(x)
    return float(values[0]) if x.ndim == 1 else values


def analytic_normals(scene: SceneSpec, points: np.ndarray, h: float = NORMAL_STEP) -> np.ndarray:
    """Unit normals from central differences of the scene SDF."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    grad = np.zeros_like(points)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        grad[:, axis] = (scene.sdf(points + step) - scene.sdf(points - step)) / (2.0 * h)
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    return grad / np.maximum(norm, 1e-12)


@dataclass(eq=False)
class TraceResult:
    """
    Batched sphere-tracing outcome.

    Attributes:
        t (np.ndarray): (N,) hit distances (NaN on misses)
        points (np.ndarray): (N, 3) hit points (NaN on misses)
        normals (np.ndarray): (N, 3) unit normals (NaN on misses)
        hit (np.ndarray): (N,) bool
    """
    t: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    hit: np.ndarray


@dataclass(frozen=True, eq=False)
class SphereHit:
    t: float
    point: np.ndarray
    normal: np.ndarray


def trace_rays(
    scene: SceneSpec,
    origins: np.ndarray,
    directions: np.ndarray,
    max_steps: int = TRACE_MAX_STEPS,
    eps: float = TRACE_EPS,
) -> TraceResult:
    """Sphere trace every ray; converged when ``|s| < eps``, miss after ``max_steps``."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        s = scene.sdf(origins[idx] + t[idx, None] * directions[idx])
        done = np.abs(s) < eps
        hit[idx[done]] = True
        active[idx[done]] = False
        moving = idx[~done]
        t[moving] += s[~done]

    t = np.where(hit, t, np.nan)
    points = origins + t[:, None] * directions
    normals = np.full((n, 3), np.nan)
    if hit.any():
        normals[hit] = analytic_normals(scene, points[hit])
    return TraceResult(t=t, points=points, normals=normals, hit=hit)


def sphere_trace(
    scene: SceneSpec, ray: Ray, max_steps: int = TRACE_MAX_STEPS, eps: float = TRACE_EPS
) -> Optional[SphereHit]:
    """Sphere trace one ray; None on a miss."""
    result = trace_rays(scene, ray.origin[None], ray.direction[None], max_steps, eps)
    if not result.hit[0]:
        return None
    return SphereHit(float(result.t[0]), result.points[0], result.normals[0])


@dataclass(eq=False)
class GtView:
    """
    Ground-truth rendering of one camera.

    Attributes:
        image (np.ndarray): (H, W, 3) shaded RGB in [0, 1]
        depth (np.ndarray): (H, W) ray distance, 0 on misses
        normal (np.ndarray): (H, W, 3) unit normals, 0 on misses
        camera (CameraModel): the camera
        hit (np.ndarray): (H, W) bool
    """
    image: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    camera: CameraModel
    hit: np.ndarray


def shade(scene: SceneSpec, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Lambertian shading with a constant ambient term."""
    lambert = np.maximum(normals @ scene.light, 0.0)
    return np.clip(scene.albedo_at(points, normals) * (AMBIENT + lambert)[:, None], 0.0, 1.0)


def render_gt_view(scene: SceneSpec, cam: CameraModel) -> GtView:
    rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing='ij')
    pixels = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=-1)
    origins, directions = pixels_to_rays(cam, pixels)
    result = trace_rays(scene, origins, directions)

    h, w = cam.height, cam.width
    image = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    normal = np.zeros((h * w, 3))
    hit = result.hit
    if hit.any():
        image[hit] = shade(scene, result.points[hit], result.normals[hit])
        depth[hit] = result.t[hit]
        normal[hit] = result.normals[hit]
    misses = int((~hit).sum())
    if misses:
        logger.warning(f"{misses} of {h * w} pixels missed every surface")
    return GtView(image.reshape(h, w, 3), depth.reshape(h, w), normal.reshape(h, w, 3), cam, hit.reshape(h, w))


def render_gt_views(scene: SceneSpec, cams: Sequence[CameraModel], workers: int = 1) -> List[GtView]:
    """Sphere-trace and shade every pixel of every camera."""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        views = list(pool.map(lambda cam: render_gt_view(scene, cam), cams))
    logger.info(f"Rendered {len(views)} ground-truth views")
    return views


def sample_surface_points(scene: SceneSpec, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """
    Uniform samples on the visible scene surface.

    Every primitive surface is sampled by area and points not on the free-space
    boundary (``|sdf| >= 1e-6``, e.g. floor under the table) are rejected.
    """
    if n_points <= 0:
        raise DomainError(f"n_points must be > 0, got {n_points}")
    patches = [patch for prim in scene.primitives for patch in prim.surface_patches()]
    areas = np.array([area for _, area, _ in patches])
    probs = areas / areas.sum()

    collected: List[np.ndarray] = []
    total = 0
    while total < n_points:
        batch = max(2 * (n_points - total), 256)
        choice = rng.choice(len(patches), size=batch, p=probs)
        points = np.empty((batch, 3))
        for i, (kind, _, params) in enumerate(patches):
            sel = np.nonzero(choice == i)[0]
            if not len(sel):
                continue
            if kind == 'rect':
                corner, edge_u, edge_v = params
                uv = rng.random((len(sel), 2))
                points[sel] = corner + uv[:, :1] * edge_u + uv[:, 1:] * edge_v
            else:
                center, radius = params
                direction = rng.normal(size=(len(sel), 3))
                direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
                points[sel] = center + float(radius) * direction
        keep = np.abs(scene.sdf(points)) < SURFACE_TOLERANCE
        collected.append(points[keep])
        total += int(keep.sum())
    return np.concatenate(collected)[:n_points]


def gt_point_cloud(scene: SceneSpec, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Ground-truth surface cloud for mesh evaluation."""
    points = sample_surface_points(scene, n_points, rng)
    logger.info(f"Sampled {len(points)} ground-truth surface points")
    return points


def visible_from(scene: SceneSpec, cam: CameraModel, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Project ``points`` into ``cam`` and test visibility by tracing from the camera.

    Returns:
        Tuple of (u, v, visible mask)
    """
    u, v, depth = project_points(cam, points)
    inside = (depth > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    visible = np.zeros(len(points), dtype=bool)
    idx = np.nonzero(inside)[0]
    if len(idx):
        offsets = points[idx] - cam.center
        dist = np.linalg.norm(offsets, axis=-1)
        result = trace_rays(scene, np.broadcast_to(cam.center, offsets.shape), offsets / dist[:, None])
        visible[idx] = result.hit & (np.abs(result.t - dist) <= OCCLUSION_TOLERANCE * dist)
    return u, v, visible


def make_correspondences(
    scene: SceneSpec,
    cams: Sequence[CameraModel],
    n_points: int,
    pixel_noise_sigma: float,
    rng: np.random.Generator,
    window: Optional[int] = 2,
) -> Tuple[List[Correspondence], List[Tuple[float, float]]]:
    """
    Exact correspondences from projected surface points.

    Every sampled surface point visible in views ``a < b`` (with ``b - a <= window``
    unless window is None) yields one correspondence. Gaussian pixel noise is added
    afterwards; noisy pixels leaving the image are dropped.

    Returns:
        Tuple of (correspondences, true ray distances (d_a, d_b) per correspondence)
    """
    if n_points <= 0:
        raise DomainError(f"n_points must be > 0, got {n_points}")
    points = sample_surface_points(scene, n_points, rng)
    projections = [visible_from(scene, cam, points) for cam in cams]

    matches: List[Correspondence] = []
    depths: List[Tuple[float, float]] = []
    for a in range(len(cams)):
        for b in range(a + 1, len(cams)):
            if window is not None and b - a > window:
                break
            ua, va, vis_a = projections[a]
            ub, vb, vis_b = projections[b]
            for k in np.nonzero(vis_a & vis_b)[0]:
                pa = np.array([ua[k], va[k]])
                pb = np.array([ub[k], vb[k]])
                if pixel_noise_sigma > 0:
                    pa = pa + rng.normal(scale=pixel_noise_sigma, size=2)
                    pb = pb + rng.normal(scale=pixel_noise_sigma, size=2)
                    if not (cams[a].contains(*pa) and cams[b].contains(*pb)):
                        continue
                matches.append(Correspondence(a, b, float(pa[0]), float(pa[1]), float(pb[0]), float(pb[1]), 1.0))
                depths.append((
                    float(np.linalg.norm(points[k] - cams[a].center)),
                    float(np.linalg.norm(points[k] - cams[b].center)),
                ))
    logger.info(f"Generated {len(matches)} synthetic correspondences from {len(points)} surface points")
    return matches, depths


class SynthService:
    """
    Service class producing a synthetic dataset.

    Attributes:
        scene (SceneSpec): analytic scene
        cams (list): cameras to render
        workers (int): thread pool size
    """

    def __init__(self, scene: SceneSpec, cams: Sequence[CameraModel], workers: int = 1):
        scene.validate()
        self.scene = scene
        self.cams = list(cams)
        self.workers = max(1, workers)
        logger.info(f"SynthService initialized ({len(self.cams)} cameras, {len(scene.primitives)} primitives)")

    def render(self) -> List[GtView]:
        return render_gt_views(self.scene, self.cams, self.workers)

    def gt_points(self, n_points: int, seed: int) -> np.ndarray:
        return gt_point_cloud(self.scene, n_points, np.random.default_rng(seed))

    def correspondences(
        self, n_points: int, noise: float, seed: int, window: Optional[int] = 2
    ) -> Tuple[List[Correspondence], List[Tuple[float, float]]]:
        return make_correspondences(self.scene, self.cams, n_points, noise, np.random.default_rng(seed), window)
