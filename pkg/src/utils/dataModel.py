"""
Data models for sdfrecon.

This module provides data classes for the analytic scene description used by
the synthetic dataset generator, the in-memory dataset and the run directory
layout, with YAML loading and validation for the scene description.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from errors import DataError
from logger import get_logger
from utils.geometry import Bounds, CameraModel


logger = get_logger(__name__)

# Below is a sample scene.yaml
# light_direction: [0.3, 0.4, 1.0]
# bounds: [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]
# primitives:
#   - name: room
#     kind: box
#     center: [0.0, 0.0, 0.0]
#     half_extents: [1.0, 1.0, 1.0]
#     hollow: true
#     albedo: {kind: checker_floor, color: [0.75, 0.72, 0.68], color2: [0.15, 0.15, 0.2], period: 0.25}
#   - name: ball
#     kind: sphere
#     center: [0.25, 0.15, -0.2]
#     radius: 0.2
#     albedo: {kind: checker, color: [0.8, 0.3, 0.2], color2: [0.2, 0.3, 0.8], period: 0.1}

ALBEDO_KINDS = ('flat', 'checker', 'checker_floor', 'checker_sides')
PRIMITIVE_KINDS = ('box', 'sphere')
UP_COSINE = 0.9


@dataclass
class Albedo:
    """
    Surface color pattern.

    Attributes:
        kind (str): 'flat', 'checker' (3D checkerboard everywhere),
            'checker_floor' (checkerboard on upward facing surfaces only) or
            'checker_sides' (checkerboard on non-horizontal surfaces only)
        color (tuple): base RGB in [0, 1]
        color2 (tuple): alternate checker RGB
        period (float): checker cell size in scene units
    """
    kind: str = 'flat'
    color: Tuple[float, float, float] = (0.75, 0.72, 0.68)
    color2: Tuple[float, float, float] = (0.15, 0.15, 0.2)
    period: float = 0.25

    @staticmethod
    def from_dict(data: dict) -> Albedo:
        return Albedo(
            kind=data.get('kind', 'flat'),
            color=tuple(float(c) for c in data.get('color', (0.75, 0.72, 0.68))),
            color2=tuple(float(c) for c in data.get('color2', (0.15, 0.15, 0.2))),
            period=float(data.get('period', 0.25)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'color': list(self.color), 'color2': list(self.color2), 'period': self.period}

    def validate(self) -> List[str]:
        problems = []
        if self.kind not in ALBEDO_KINDS:
            problems.append(f"albedo kind {self.kind!r} not one of {ALBEDO_KINDS}")
        for name in ('color', 'color2'):
            rgb = getattr(self, name)
            if len(rgb) != 3 or any(not 0.0 <= c <= 1.0 for c in rgb):
                problems.append(f"albedo {name} must be 3 values in [0, 1], got {rgb}")
        if self.period <= 0:
            problems.append(f"albedo period must be > 0, got {self.period}")
        return problems

    def evaluate(self, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
        """(N, 3) RGB at surface points with outward (free-space facing) normals."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        base = np.broadcast_to(np.asarray(self.color), points.shape).copy()
        if self.kind == 'flat':
            return base
        # quarter-period offset keeps the cell borders off the room walls
        cells = np.floor((points + 0.25 * self.period) / self.period).astype(np.int64)
        odd = (cells.sum(axis=-1) % 2) == 1
        if self.kind == 'checker_floor':
            odd &= normals[:, 2] > UP_COSINE
        elif self.kind == 'checker_sides':
            odd &= np.abs(normals[:, 2]) < UP_COSINE
        base[odd] = self.color2
        return base


@dataclass
class Primitive:
    """
    Axis-aligned box or sphere.

    Attributes:
        name (str): label used in logs
        kind (str): 'box' or 'sphere'
        center (tuple): centre position
        half_extents (tuple): box half sizes
        radius (float): sphere radius
        hollow (bool): the interior is free space (the room shell)
        albedo (Albedo): surface pattern
    """
    name: str
    kind: str
    center: Tuple[float, float, float]
    half_extents: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.0
    hollow: bool = False
    albedo: Albedo = field(default_factory=Albedo)

    @staticmethod
    def from_dict(data: dict) -> Primitive:
        return Primitive(
            name=str(data.get('name', data.get('kind', 'primitive'))),
            kind=data.get('kind', ''),
            center=tuple(float(c) for c in data.get('center', (0.0, 0.0, 0.0))),
            half_extents=tuple(float(c) for c in data.get('half_extents', (0.0, 0.0, 0.0))),
            radius=float(data.get('radius', 0.0)),
            hollow=bool(data.get('hollow', False)),
            albedo=Albedo.from_dict(data.get('albedo', {})),
        )

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {'name': self.name, 'kind': self.kind, 'center': list(self.center)}
        if self.kind == 'box':
            data['half_extents'] = list(self.half_extents)
        else:
            data['radius'] = self.radius
        if self.hollow:
            data['hollow'] = True
        data['albedo'] = self.albedo.to_dict()
        return data

    def validate(self) -> List[str]:
        problems = [f"{self.name}: {p}" for p in self.albedo.validate()]
        if self.kind not in PRIMITIVE_KINDS:
            problems.append(f"{self.name}: kind {self.kind!r} not one of {PRIMITIVE_KINDS}")
        if self.kind == 'box' and (len(self.half_extents) != 3 or min(self.half_extents) <= 0):
            problems.append(f"{self.name}: box half_extents must be 3 positive values")
        if self.kind == 'sphere' and self.radius <= 0:
            problems.append(f"{self.name}: sphere radius must be > 0")
        if self.hollow and self.kind != 'box':
            problems.append(f"{self.name}: only boxes can be hollow")
        return problems

    def solid_sdf(self, points: np.ndarray) -> np.ndarray:
        """Signed distance of the solid primitive, negative inside it."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3) - np.asarray(self.center)
        if self.kind == 'sphere':
            return np.linalg.norm(p, axis=-1) - self.radius
        q = np.abs(p) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Signed distance with free space positive (interior of a hollow primitive)."""
        d = self.solid_sdf(points)
        return -d if self.hollow else d

    @property
    def lo(self) -> np.ndarray:
        ext = np.asarray(self.half_extents) if self.kind == 'box' else np.full(3, self.radius)
        return np.asarray(self.center) - ext

    @property
    def hi(self) -> np.ndarray:
        ext = np.asarray(self.half_extents) if self.kind == 'box' else np.full(3, self.radius)
        return np.asarray(self.center) + ext

    def surface_patches(self) -> List[Tuple[str, float, Tuple[np.ndarray, ...]]]:
        """
        Pieces for area-weighted surface sampling.

        Returns:
            List of (kind, area, parameters); boxes give six 'rect' faces as
            (corner, edge_u, edge_v), spheres one 'sphere' entry as (center, radius)
        """
        if self.kind == 'sphere':
            area = 4.0 * math.pi * self.radius ** 2
            return [('sphere', area, (np.asarray(self.center, dtype=np.float64), np.array(self.radius)))]
        lo, hi = self.lo, self.hi
        size = hi - lo
        patches = []
        for axis in range(3):
            u_axis, v_axis = [a for a in range(3) if a != axis]
            edge_u = np.zeros(3)
            edge_v = np.zeros(3)
            edge_u[u_axis] = size[u_axis]
            edge_v[v_axis] = size[v_axis]
            area = float(size[u_axis] * size[v_axis])
            for side in (lo[axis], hi[axis]):
                corner = lo.copy()
                corner[axis] = side
                patches.append(('rect', area, (corner, edge_u, edge_v)))
        return patches


@dataclass
class SceneSpec:
    """
    Analytic indoor scene: one hollow room plus solid furniture.

    Attributes:
        primitives (list): Primitive instances, exactly one of them hollow
        light_direction (tuple): direction towards the light (normalised on use)
        bounds (Bounds): scene box for rendering, Eikonal sampling and meshing
    """
    primitives: List[Primitive]
    light_direction: Tuple[float, float, float] = (0.3, 0.4, 1.0)
    bounds: Optional[Bounds] = None

    def __post_init__(self):
        if self.bounds is None and self.primitives:
            rooms = [p for p in self.primitives if p.hollow]
            if rooms:
                self.bounds = Bounds(rooms[0].lo, rooms[0].hi)

    @property
    def room(self) -> Primitive:
        return next(p for p in self.primitives if p.hollow)

    @property
    def solids(self) -> List[Primitive]:
        return [p for p in self.primitives if not p.hollow]

    @property
    def light(self) -> np.ndarray:
        light = np.asarray(self.light_direction, dtype=np.float64)
        return light / np.linalg.norm(light)

    def validate(self) -> None:
        """
        Check the scene invariants.

        Raises:
            DataError: Listing every violation
        """
        problems: List[str] = []
        for p in self.primitives:
            problems.extend(p.validate())
        rooms = [p for p in self.primitives if p.hollow]
        if len(rooms) != 1:
            problems.append(f"exactly one hollow room primitive is required, found {len(rooms)}")
        elif rooms[0].kind == 'box':
            room = rooms[0]
            for p in self.solids:
                if p.kind == 'sphere' and p.radius > 0 and (np.any(p.lo < room.lo) or np.any(p.hi > room.hi)):
                    problems.append(f"{p.name} extends outside the room")
                elif p.kind == 'box' and not np.all(
                    (np.asarray(p.center) > room.lo) & (np.asarray(p.center) < room.hi)
                ):
                    problems.append(f"{p.name} centre lies outside the room")
        light = np.asarray(self.light_direction, dtype=np.float64)
        if light.shape != (3,) or not np.all(np.isfinite(light)) or np.linalg.norm(light) == 0:
            problems.append(f"light_direction must be a nonzero 3-vector, got {self.light_direction}")
        if problems:
            raise DataError("invalid scene description", problems)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Free-space signed distance: room interior union-complement of the furniture."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        values = [p.sdf(points) for p in self.primitives]
        return np.min(np.stack(values, axis=0), axis=0)

    def albedo_at(self, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
        """Albedo of the primitive each surface point lies on."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        owner = np.argmin(np.stack([np.abs(p.sdf(points)) for p in self.primitives]), axis=0)
        colors = np.zeros_like(points)
        for i, prim in enumerate(self.primitives):
            sel = owner == i
            if np.any(sel):
                colors[sel] = prim.albedo.evaluate(points[sel], normals[sel])
        return colors

    @staticmethod
    def from_dict(data: dict) -> SceneSpec:
        bounds = data.get('bounds')
        return SceneSpec(
            primitives=[Primitive.from_dict(p) for p in data.get('primitives', [])],
            light_direction=tuple(float(c) for c in data.get('light_direction', (0.3, 0.4, 1.0))),
            bounds=Bounds(bounds[0], bounds[1]) if bounds else None,
        )

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            'light_direction': list(self.light_direction),
            'primitives': [p.to_dict() for p in self.primitives],
        }
        if self.bounds is not None:
            data['bounds'] = self.bounds.to_list()
        return data

    @staticmethod
    def load_yaml(yaml_path: str) -> SceneSpec:
        """
        Load and validate a scene description.

        Raises:
            DataError: If the file is unreadable or the scene is invalid
        """
        logger.info(f"Loading scene description from {yaml_path}")
        try:
            with open(yaml_path, 'r') as f:
                data = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            logger.error(f"Failed to read {yaml_path}: {e}")
            raise DataError(f"cannot read scene description {yaml_path}: {e}") from e
        try:
            scene = SceneSpec.from_dict(data)
        except (TypeError, ValueError, IndexError) as e:
            raise DataError(f"malformed scene description {yaml_path}: {e}") from e
        scene.validate()
        logger.info(f"Loaded scene with {len(scene.primitives)} primitives")
        return scene

    def save_yaml(self, yaml_path: str) -> None:
        with open(yaml_path, 'w') as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)


@dataclass(eq=False)
class DatasetView:
    """
    One posed image.

    Attributes:
        index (int): view index
        image (np.ndarray): (H, W, 3) float64 RGB in [0, 1]
        camera (CameraModel): calibrated camera
        depth (np.ndarray): optional (H, W) ray distance per pixel, 0 where unknown
    """
    index: int
    image: np.ndarray
    camera: CameraModel
    depth: Optional[np.ndarray] = None


@dataclass(eq=False)
class Dataset:
    """
    Eagerly loaded dataset directory.

    Attributes:
        root (str): directory path
        views (list): DatasetView per image
        bounds (Bounds): scene box
        matches (list): externally supplied correspondences (may be empty)
        gt_points (np.ndarray): optional ground-truth surface cloud
        scene (SceneSpec): optional analytic scene description
    """
    root: str
    views: List[DatasetView]
    bounds: Bounds
    matches: list = field(default_factory=list)
    gt_points: Optional[np.ndarray] = None
    scene: Optional[SceneSpec] = None

    @property
    def cameras(self) -> List[CameraModel]:
        return [v.camera for v in self.views]

    @property
    def images(self) -> List[np.ndarray]:
        return [v.image for v in self.views]

    @property
    def has_depth(self) -> bool:
        return bool(self.views) and all(v.depth is not None for v in self.views)

    def __len__(self) -> int:
        return len(self.views)

    def __str__(self) -> str:
        h, w = self.views[0].image.shape[:2] if self.views else (0, 0)
        return (
            f"Dataset(root={self.root}, views={len(self.views)}, size={w}x{h}, "
            f"matches={len(self.matches)}, depth={self.has_depth}, "
            f"gt_points={0 if self.gt_points is None else len(self.gt_points)})"
        )


class RunDir:
    """
    Layout of a training run directory.

    Attributes:
        path (str): run directory
    """

    CONFIG = 'config.txt'
    RUN_INFO = 'run.yaml'
    LOG = 'train_log.csv'
    RUN_LOG = 'run.log'
    CHECKPOINTS = 'checkpoints'
    MESH = 'mesh.obj'
    METRICS_CSV = 'metrics.csv'
    METRICS_TXT = 'metrics.txt'
    PRED_POINTS = 'pred_points.xyz'
    RENDERS = 'renders'

    def __init__(self, path: str):
        self.path = path

    def create(self) -> RunDir:
        os.makedirs(self.checkpoints, exist_ok=True)
        return self

    def file(self, name: str) -> str:
        return os.path.join(self.path, name)

    @property
    def config(self) -> str:
        return self.file(self.CONFIG)

    @property
    def run_info(self) -> str:
        return self.file(self.RUN_INFO)

    @property
    def log(self) -> str:
        return self.file(self.LOG)

    @property
    def run_log(self) -> str:
        return self.file(self.RUN_LOG)

    @property
    def checkpoints(self) -> str:
        return self.file(self.CHECKPOINTS)

    @property
    def mesh(self) -> str:
        return self.file(self.MESH)

    @property
    def renders(self) -> str:
        return self.file(self.RENDERS)

    def write_run_info(self, data_path: str, bounds: Bounds) -> None:
        with open(self.run_info, 'w') as f:
            yaml.safe_dump({'data': os.path.abspath(data_path), 'bounds': bounds.to_list()}, f)

    def read_run_info(self) -> Dict[str, Any]:
        if not os.path.exists(self.run_info):
            raise DataError(f"{self.run_info} not found; is {self.path} a training run?")
        with open(self.run_info, 'r') as f:
            return yaml.safe_load(f) or {}

    def __str__(self) -> str:
        return f"RunDir({self.path})"
