"""
Meshing service module for surface extraction and mesh evaluation.

The learned signed distance is sampled on a regular grid and its zero level
set extracted with marching cubes. Meshes are compared with a ground-truth
point cloud through the accuracy / completeness / precision / recall /
F-score metrics computed with k-d tree nearest neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import mcubes
import numpy as np
import torch
import trimesh
from scipy.spatial import cKDTree

from errors import DomainError
from logger import get_logger
from models.fields import SceneFields, eval_sdf
from models.mlp import DTYPE, DiffContext
from utils.geometry import Bounds


logger = get_logger(__name__)

MIN_FACE_AREA = 1e-12
METRIC_COLUMNS = ('Acc', 'Comp', 'Prec', 'Recall', 'F-score')


@dataclass(eq=False)
class TriangleMesh:
    """
    Indexed triangle mesh.

    Attributes:
        vertices (np.ndarray): (V, 3) float64 positions
        faces (np.ndarray): (F, 3) int64 vertex indices
        normals (np.ndarray): optional (V, 3) per-vertex normals
    """
    vertices: np.ndarray
    faces: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DomainError(
                f"face indices must lie in [0, {len(self.vertices)}), "
                f"got [{self.faces.min()}, {self.faces.max()}]"
            )

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        if self.is_empty:
            return np.zeros(0)
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def cleaned(self, min_area: float = MIN_FACE_AREA) -> TriangleMesh:
        """Copy without faces of area below ``min_area`` and without unreferenced vertices."""
        faces = self.faces[self.face_areas() >= min_area] if not self.is_empty else self.faces
        used = np.unique(faces)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        normals = self.normals[used] if self.normals is not None else None
        return TriangleMesh(self.vertices[used], remap[faces], normals)

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)


@dataclass(frozen=True)
class MetricsReport:
    """
    Point-cloud comparison of a reconstruction against ground truth.

    Attributes:
        accuracy (float): mean distance from predicted to nearest ground-truth point
        completeness (float): mean distance from ground-truth to nearest predicted point
        precision (float): share of predicted points closer than ``threshold``
        recall (float): share of ground-truth points closer than ``threshold``
        f_score (float): harmonic mean of precision and recall
        threshold (float): distance threshold tau
        n_pred, n_gt (int): cloud sizes
    """
    accuracy: float
    completeness: float
    precision: float
    recall: float
    f_score: float
    threshold: float
    n_pred: int
    n_gt: int

    def values(self) -> Tuple[float, ...]:
        return (self.accuracy, self.completeness, self.precision, self.recall, self.f_score)

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(METRIC_COLUMNS, self.values()))

    @staticmethod
    def csv_header() -> str:
        return ','.join(METRIC_COLUMNS + ('threshold', 'n_pred', 'n_gt'))

    def csv_row(self) -> str:
        values = ','.join(f"{v:.6f}" for v in self.values())
        return f"{values},{self.threshold:g},{self.n_pred},{self.n_gt}"

    def pretty(self) -> str:
        return '\n'.join([
            f"Acc      {self.accuracy:.4f}",
            f"Comp     {self.completeness:.4f}",
            f"Prec     {self.precision:.4f}",
            f"Recall   {self.recall:.4f}",
            f"F-score  {self.f_score:.4f}",
            f"(tau={self.threshold:g}, {self.n_pred} predicted / {self.n_gt} ground-truth points)",
        ])


def grid_points(bounds: Bounds, resolution: int) -> Tuple[np.ndarray, Tuple[np.ndarray, ...]]:
    """(res^3, 3) lattice points in ``ij`` order and the three axis coordinate arrays."""
    axes = tuple(np.linspace(bounds.lo[d], bounds.hi[d], resolution) for d in range(3))
    xx, yy, zz = np.meshgrid(*axes, indexing='ij')
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=-1), axes


def marching_cubes(
    sdf: Callable[[np.ndarray], np.ndarray],
    bounds: Bounds,
    resolution: int,
    chunk: int = 65536,
) -> TriangleMesh:
    """
    Extract the zero level set of ``sdf`` inside ``bounds``.

    Args:
        sdf: maps (N, 3) points to (N,) signed distances
        bounds: sampling box
        resolution: grid points per axis
        chunk: points evaluated per call of ``sdf``

    Returns:
        TriangleMesh in world coordinates; empty when the grid never changes sign

    Raises:
        DomainError: If resolution < 2
    """
    if resolution < 2:
        raise DomainError(f"resolution must be >= 2, got {resolution}")
    points, _ = grid_points(bounds, resolution)
    values = np.concatenate([
        np.asarray(sdf(points[i:i + chunk]), dtype=np.float64).reshape(-1)
        for i in range(0, len(points), chunk)
    ])
    volume = values.reshape(resolution, resolution, resolution)
    if volume.min() > 0 or volume.max() < 0:
        logger.warning("SDF grid has no sign change, extracted mesh is empty")
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    vertices, faces = mcubes.marching_cubes(volume, 0.0)
    vertices = bounds.lo + vertices * (bounds.extent / (resolution - 1))
    mesh = TriangleMesh(vertices, faces)
    logger.info(f"Marching cubes at {resolution}^3: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")
    return mesh


def fields_sdf(fields: SceneFields) -> Callable[[np.ndarray], np.ndarray]:
    """Numpy signed-distance evaluator of the geometry network."""
    ctx = DiffContext.inference()

    def sdf(points: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            s, _ = eval_sdf(fields, torch.as_tensor(points, dtype=DTYPE), ctx)
        return s.numpy()

    return sdf


def sample_mesh_surface(mesh: TriangleMesh, n_points: int, seed: int = 0) -> np.ndarray:
    """
    Area-weighted uniform samples on the mesh surface.

    Raises:
        DomainError: If the mesh is empty or n_points <= 0
    """
    if mesh.is_empty or mesh.area() <= 0:
        raise DomainError("cannot sample an empty mesh")
    if n_points <= 0:
        raise DomainError(f"n_points must be > 0, got {n_points}")
    points, _ = trimesh.sample.sample_surface(mesh.to_trimesh(), n_points, seed=seed)
    return np.asarray(points, dtype=np.float64)


def eval_metrics(pred_points: np.ndarray, gt_points: np.ndarray, threshold: float) -> MetricsReport:
    """
    Compare two point clouds.

    Raises:
        DomainError: If either cloud is empty or threshold <= 0
    """
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise DomainError(f"point clouds must be nonempty (pred={len(pred)}, gt={len(gt)})")
    if threshold <= 0:
        raise DomainError(f"threshold must be > 0, got {threshold}")

    dist_pred, _ = cKDTree(gt).query(pred)
    dist_gt, _ = cKDTree(pred).query(gt)
    precision = float(np.mean(dist_pred < threshold))
    recall = float(np.mean(dist_gt < threshold))
    f_score = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(
        accuracy=float(np.mean(dist_pred)),
        completeness=float(np.mean(dist_gt)),
        precision=precision,
        recall=recall,
        f_score=f_score,
        threshold=threshold,
        n_pred=len(pred),
        n_gt=len(gt),
    )


class MeshingService:
    """
    Service class extracting and evaluating meshes of trained fields.

    Attributes:
        bounds (Bounds): extraction box, already padded
        resolution (int): grid points per axis
    """

    def __init__(self, bounds: Bounds, resolution: int = 128, padding: float = 0.0):
        if resolution < 2:
            raise DomainError(f"resolution must be >= 2, got {resolution}")
        if padding < 0:
            raise DomainError(f"padding must be >= 0, got {padding}")
        # walls of the scene box sit on its faces; pad so the grid straddles them
        self.bounds = bounds.padded(padding) if padding > 0 else bounds
        self.resolution = resolution
        logger.info(f"MeshingService initialized (resolution={resolution}, bounds={bounds.to_list()})")

    def extract(self, fields: SceneFields) -> TriangleMesh:
        mesh = marching_cubes(fields_sdf(fields), self.bounds, self.resolution).cleaned()
        if mesh.is_empty:
            logger.warning("Extracted mesh is empty")
        return mesh

    def evaluate(
        self, mesh: TriangleMesh, gt_points: np.ndarray, threshold: float, n_samples: int, seed: int = 0
    ) -> Tuple[MetricsReport, np.ndarray]:
        """Sample the mesh and score it against ``gt_points``; returns (report, samples)."""
        pred = sample_mesh_surface(mesh, n_samples, seed)
        report = eval_metrics(pred, gt_points, threshold)
        logger.info(
            f"Metrics: Acc={report.accuracy:.4f} Comp={report.completeness:.4f} "
            f"Prec={report.precision:.4f} Recall={report.recall:.4f} F-score={report.f_score:.4f}"
        )
        return report, pred
