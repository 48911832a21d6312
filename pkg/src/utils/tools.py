"""
Tools module for dataset, artifact and checkpoint I/O.

This module reads and writes every on-disk format of the pipeline (PPM/PGM
images, poses, intrinsics, matches, sparse depths, meshes, point clouds,
segmentations, metrics) and manages training checkpoints.
"""

from __future__ import annotations

import glob
import os
import pickle
import re
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch

from errors import DataError
from logger import get_logger
from utils.dataModel import Dataset, DatasetView, SceneSpec
from utils.geometry import Bounds, CameraModel


logger = get_logger(__name__)

DEPTH_SCALE = 1000.0
CHECKPOINT_FORMAT = 'sdfrecon-ckpt-1'
_CKPT_PATTERN = re.compile(r'ckpt_(\d+)\.pt$')


# ---------------------------------------------------------------- images

def _check_magic(path: str, magic: bytes) -> None:
    try:
        with open(path, 'rb') as f:
            head = f.read(2)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if head != magic:
        raise DataError(f"{path}: bad magic {head!r}, expected {magic!r}")


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write an (H, W, 3) RGB float image in [0, 1] as binary PPM."""
    rgb = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(path, cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise DataError(f"failed to write {path}")


def read_ppm(path: str) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) float64 RGB image in [0, 1]."""
    _check_magic(path, b'P6')
    bgr = cv2.imread(path, cv2.IMREAD_COLOR)
    if bgr is None:
        raise DataError(f"{path}: unreadable PPM")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def write_pgm(path: str, image: np.ndarray) -> None:
    """Write an 8- or 16-bit single channel image as binary PGM."""
    image = np.asarray(image)
    if image.dtype not in (np.uint8, np.uint16):
        raise DataError(f"PGM images must be uint8 or uint16, got {image.dtype}")
    if not cv2.imwrite(path, image):
        raise DataError(f"failed to write {path}")


def read_pgm(path: str) -> np.ndarray:
    """Read a binary PGM (8- or 16-bit)."""
    _check_magic(path, b'P5')
    image = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DataError(f"{path}: unreadable PGM")
    return image


def write_depth_pgm(path: str, depth: np.ndarray) -> None:
    """Ray distances as a 16-bit PGM in millimetres (0 = unknown)."""
    mm = np.clip(np.round(np.asarray(depth) * DEPTH_SCALE), 0, np.iinfo(np.uint16).max)
    write_pgm(path, mm.astype(np.uint16))


def read_depth_pgm(path: str) -> np.ndarray:
    return read_pgm(path).astype(np.float64) / DEPTH_SCALE


def unit_to_gray8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def normals_to_rgb(normals: np.ndarray) -> np.ndarray:
    """Map unit normals to [0, 1] colors."""
    return np.clip(0.5 * (np.asarray(normals) + 1.0), 0.0, 1.0)


# ---------------------------------------------------------------- text formats

def _read_lines(path: str) -> List[Tuple[int, str]]:
    try:
        with open(path, 'r') as f:
            return [(i, line.strip()) for i, line in enumerate(f, start=1) if line.strip()]
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e


def write_poses(path: str, poses: Sequence[np.ndarray]) -> None:
    with open(path, 'w') as f:
        for pose in poses:
            f.write(' '.join(f"{v:.17g}" for v in np.asarray(pose).reshape(16)) + '\n')


def read_poses(path: str) -> List[np.ndarray]:
    """
    One camera-to-world matrix per line (16 row-major values).

    Raises:
        DataError: Listing every malformed line
    """
    poses, problems = [], []
    for lineno, line in _read_lines(path):
        try:
            values = [float(v) for v in line.split()]
        except ValueError:
            problems.append(f"{os.path.basename(path)} line {lineno}: non-numeric value")
            continue
        if len(values) != 16:
            problems.append(f"{os.path.basename(path)} line {lineno}: expected 16 values, got {len(values)}")
            continue
        pose = np.array(values).reshape(4, 4)
        if not np.all(np.isfinite(pose)):
            problems.append(f"{os.path.basename(path)} line {lineno}: non-finite pose")
            continue
        poses.append(pose)
    if problems:
        raise DataError(f"malformed poses in {path}", problems)
    return poses


def write_intrinsics(path: str, cam: CameraModel) -> None:
    with open(path, 'w') as f:
        f.write(f"{cam.fx:.17g} {cam.fy:.17g} {cam.cx:.17g} {cam.cy:.17g} {cam.width} {cam.height}\n")


def read_intrinsics(path: str) -> Tuple[float, float, float, float, int, int]:
    lines = _read_lines(path)
    if len(lines) != 1:
        raise DataError(f"{path}: expected exactly one line 'fx fy cx cy width height'")
    parts = lines[0][1].split()
    try:
        if len(parts) != 6:
            raise ValueError(f"expected 6 values, got {len(parts)}")
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        width, height = int(parts[4]), int(parts[5])
    except ValueError as e:
        raise DataError(f"{path} line {lines[0][0]}: {e}") from e
    return fx, fy, cx, cy, width, height


def write_matches(path: str, matches) -> None:
    with open(path, 'w') as f:
        for m in matches:
            f.write(f"{m.view_a} {m.view_b} {m.ua:.17g} {m.va:.17g} {m.ub:.17g} {m.vb:.17g}\n")


def read_matches(path: str) -> list:
    """Correspondences from ``viewA viewB uA vA uB vB`` lines."""
    from services.sparse_depth_service import Correspondence

    matches, problems = [], []
    for lineno, line in _read_lines(path):
        parts = line.split()
        try:
            if len(parts) != 6:
                raise ValueError(f"expected 6 values, got {len(parts)}")
            matches.append(Correspondence(
                int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]), float(parts[4]), float(parts[5])
            ))
        except ValueError as e:
            problems.append(f"{os.path.basename(path)} line {lineno}: {e}")
    if problems:
        raise DataError(f"malformed matches in {path}", problems)
    return matches


def write_sparse_depth(directory: str, depth_map) -> None:
    """One ``<view>.txt`` file per view with ``u v D_app gap`` lines."""
    os.makedirs(directory, exist_ok=True)
    for view in depth_map.views():
        with open(os.path.join(directory, f"{view}.txt"), 'w') as f:
            for r in depth_map.for_view(view):
                f.write(f"{r.u:.17g} {r.v:.17g} {r.depth:.17g} {r.gap:.17g}\n")


def read_sparse_depth(directory: str):
    from services.sparse_depth_service import SparseDepthMap

    depth_map = SparseDepthMap()
    for path in sorted(glob.glob(os.path.join(directory, '*.txt'))):
        name = os.path.splitext(os.path.basename(path))[0]
        if not name.isdigit():
            continue
        for lineno, line in _read_lines(path):
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"{path} line {lineno}: expected 'u v D_app gap'")
            depth_map.add(int(name), *(float(p) for p in parts))
    return depth_map


def write_xyz(path: str, points: np.ndarray) -> None:
    np.savetxt(path, np.asarray(points, dtype=np.float64).reshape(-1, 3), fmt='%.17g')


def read_xyz(path: str) -> np.ndarray:
    try:
        points = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read point cloud {path}: {e}") from e
    if points.size == 0:
        return np.zeros((0, 3))
    if points.shape[1] != 3:
        raise DataError(f"{path}: expected 3 columns, got {points.shape[1]}")
    return points


def write_obj(path: str, mesh) -> None:
    """ASCII OBJ with ``v`` and 1-based ``f`` lines."""
    with open(path, 'w') as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for face in mesh.faces:
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")


def read_obj(path: str):
    from services.meshing_service import TriangleMesh

    vertices, faces = [], []
    for lineno, line in _read_lines(path):
        parts = line.split()
        if parts[0] == 'v':
            vertices.append([float(p) for p in parts[1:4]])
        elif parts[0] == 'f':
            # accept v/vt/vn references
            idx = [int(p.split('/')[0]) - 1 for p in parts[1:]]
            if len(idx) < 3:
                raise DataError(f"{path} line {lineno}: face with fewer than 3 vertices")
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(vertices).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_segments(directory: str, view: int, labels, mask) -> None:
    """Label image (ids mod 256), plane mask image and ``id size kept`` sidecar."""
    os.makedirs(directory, exist_ok=True)
    write_pgm(os.path.join(directory, f"segments_{view}.pgm"), (labels.labels % 256).astype(np.uint8))
    write_pgm(os.path.join(directory, f"plane_{view}.pgm"), mask.mask.astype(np.uint8) * 255)
    kept = set(int(k) for k in mask.kept)
    with open(os.path.join(directory, f"segments_{view}.txt"), 'w') as f:
        for seg_id, size in enumerate(labels.sizes):
            f.write(f"{seg_id} {int(size)} {int(seg_id in kept)}\n")


def write_metrics(csv_path: str, txt_path: str, report) -> None:
    with open(csv_path, 'w') as f:
        f.write(report.csv_header() + '\n')
        f.write(report.csv_row() + '\n')
    with open(txt_path, 'w') as f:
        f.write(report.pretty() + '\n')


def write_ablation(csv_path: str, txt_path: str, reports: Dict[str, object]) -> None:
    """Comparison table of several runs: ``config,Acc,Comp,Prec,Recall,F-score``."""
    from services.meshing_service import METRIC_COLUMNS

    with open(csv_path, 'w') as f:
        f.write(','.join(('config',) + METRIC_COLUMNS) + '\n')
        for name, report in reports.items():
            f.write(name + ',' + ','.join(f"{v:.6f}" for v in report.values()) + '\n')
    width = max(len(name) for name in reports) if reports else 6
    with open(txt_path, 'w') as f:
        f.write(f"{'config':<{width}}  " + '  '.join(f"{c:>8}" for c in METRIC_COLUMNS) + '\n')
        for name, report in reports.items():
            f.write(f"{name:<{width}}  " + '  '.join(f"{v:8.4f}" for v in report.values()) + '\n')


def read_ablation(csv_path: str) -> Dict[str, Dict[str, float]]:
    rows: Dict[str, Dict[str, float]] = {}
    lines = _read_lines(csv_path)
    if not lines:
        raise DataError(f"{csv_path} is empty")
    header = lines[0][1].split(',')
    for lineno, line in lines[1:]:
        values = line.split(',')
        if len(values) != len(header):
            raise DataError(f"{csv_path} line {lineno}: expected {len(header)} columns, got {len(values)}")
        rows[values[0]] = {k: float(v) for k, v in zip(header[1:], values[1:])}
    return rows


# ---------------------------------------------------------------- datasets

def image_path(root: str, index: int) -> str:
    return os.path.join(root, 'images', f"{index}.ppm")


def depth_path(root: str, index: int) -> str:
    return os.path.join(root, 'depth', f"{index}.pgm")


def load_dataset(path: str, scene_radius: float = 1.0) -> Dataset:
    """
    Load and validate a dataset directory.

    Expected layout: ``images/<i>.ppm``, ``poses.txt``, ``intrinsics.txt`` and
    optionally ``depth/<i>.pgm``, ``matches.txt``, ``gt_points.xyz`` and
    ``scene.yaml``. Without ``scene.yaml`` the scene box is the bounding box of the
    camera centres padded by ``scene_radius``.

    Raises:
        DataError: Listing every violation found
    """
    logger.info(f"Loading dataset from {path}")
    problems: List[str] = []

    if not os.path.isdir(path):
        raise DataError(f"dataset directory not found: {path}")

    intrinsics = None
    try:
        intrinsics = read_intrinsics(os.path.join(path, 'intrinsics.txt'))
    except DataError as e:
        problems.append(str(e))

    poses: List[np.ndarray] = []
    try:
        poses = read_poses(os.path.join(path, 'poses.txt'))
    except DataError as e:
        problems.extend(e.violations or [str(e)])

    image_files = glob.glob(os.path.join(path, 'images', '*.ppm'))
    if len(image_files) != len(poses):
        problems.append(f"{len(image_files)} images in images/ but {len(poses)} poses in poses.txt")

    cams: List[Optional[CameraModel]] = []
    for i, pose in enumerate(poses):
        if intrinsics is None:
            cams.append(None)
            continue
        fx, fy, cx, cy, width, height = intrinsics
        try:
            cams.append(CameraModel(fx, fy, cx, cy, width, height, pose))
        except ValueError as e:
            problems.append(f"poses.txt line {i + 1}: {e}")
            cams.append(None)

    depth_dir = os.path.join(path, 'depth')
    with_depth = os.path.isdir(depth_dir)
    views: List[DatasetView] = []
    for i, cam in enumerate(cams):
        try:
            image = read_ppm(image_path(path, i))
        except DataError as e:
            problems.append(str(e))
            continue
        if cam is not None and image.shape[:2] != (cam.height, cam.width):
            problems.append(
                f"{image_path(path, i)}: size {image.shape[1]}x{image.shape[0]} does not match "
                f"intrinsics {cam.width}x{cam.height}"
            )
            continue
        depth = None
        if with_depth:
            try:
                depth = read_depth_pgm(depth_path(path, i))
            except DataError as e:
                problems.append(str(e))
        if cam is not None:
            views.append(DatasetView(index=i, image=image, camera=cam, depth=depth))

    matches = []
    matches_file = os.path.join(path, 'matches.txt')
    if os.path.exists(matches_file):
        try:
            matches = read_matches(matches_file)
        except DataError as e:
            problems.extend(e.violations or [str(e)])
        for m in matches:
            if not (0 <= m.view_a < len(poses) and 0 <= m.view_b < len(poses)):
                problems.append(f"matches.txt references unknown view pair ({m.view_a}, {m.view_b})")
                break

    gt_points = None
    gt_file = os.path.join(path, 'gt_points.xyz')
    if os.path.exists(gt_file):
        try:
            gt_points = read_xyz(gt_file)
        except DataError as e:
            problems.append(str(e))

    scene = None
    scene_file = os.path.join(path, 'scene.yaml')
    if os.path.exists(scene_file):
        try:
            scene = SceneSpec.load_yaml(scene_file)
        except DataError as e:
            problems.extend(e.violations or [str(e)])

    if not poses and not problems:
        problems.append("dataset has no views")
    if problems:
        logger.error(f"Dataset {path} failed validation with {len(problems)} problems")
        raise DataError(f"invalid dataset {path}", problems)

    if scene is not None and scene.bounds is not None:
        bounds = scene.bounds
    else:
        bounds = Bounds.around(np.stack([c.center for c in cams]), scene_radius)

    dataset = Dataset(root=path, views=views, bounds=bounds, matches=matches, gt_points=gt_points, scene=scene)
    logger.info(f"Loaded {dataset}")
    return dataset


def save_dataset(path: str, images: Sequence[np.ndarray], cams: Sequence[CameraModel],
                 depths: Optional[Sequence[np.ndarray]] = None) -> None:
    """Write images, poses, intrinsics and optional depth maps in the dataset layout."""
    os.makedirs(os.path.join(path, 'images'), exist_ok=True)
    for i, image in enumerate(images):
        write_ppm(image_path(path, i), image)
    if depths is not None:
        os.makedirs(os.path.join(path, 'depth'), exist_ok=True)
        for i, depth in enumerate(depths):
            write_depth_pgm(depth_path(path, i), depth)
    write_poses(os.path.join(path, 'poses.txt'), [c.pose for c in cams])
    write_intrinsics(os.path.join(path, 'intrinsics.txt'), cams[0])


# ---------------------------------------------------------------- checkpoints

class CheckpointStore:
    """
    Manage the numbered checkpoints of a run.

    Checkpoints are ``torch.save`` dictionaries holding the format tag, the
    network digests, the step, log beta, the field and Adam states, the training
    configuration and the scene box.

    Attributes:
        directory (str): checkpoint directory
    """

    def __init__(self, directory: str):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        logger.debug(f"CheckpointStore at {directory}")

    def path_for(self, step: int) -> str:
        return os.path.join(self.directory, f"ckpt_{step:06d}.pt")

    def steps(self) -> List[int]:
        found = []
        for name in os.listdir(self.directory):
            match = _CKPT_PATTERN.search(name)
            if match:
                found.append(int(match.group(1)))
        return sorted(found)

    def latest(self) -> Optional[str]:
        steps = self.steps()
        return self.path_for(steps[-1]) if steps else None

    def save(self, step: int, fields, optimizer, cfg, bounds: Bounds) -> str:
        path = self.path_for(step)
        payload = {
            'format': CHECKPOINT_FORMAT,
            'digests': fields.digests(),
            'step': step,
            'log_beta': float(fields.log_beta.detach()),
            'fields': fields.state_dict(),
            'optimizer': optimizer.state_dict() if optimizer is not None else None,
            'config': cfg.to_dict(),
            'bounds': bounds.to_list(),
        }
        tmp = path + '.tmp'
        torch.save(payload, tmp)
        os.replace(tmp, path)
        logger.info(f"Saved checkpoint {path} (step {step})")
        return path

    @staticmethod
    def read(path: str) -> Dict:
        """
        Load a checkpoint dictionary.

        Raises:
            DataError: If the file is missing or not a checkpoint
        """
        try:
            payload = torch.load(path, map_location='cpu', weights_only=True)
        except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
            raise DataError(f"cannot read checkpoint {path}: {e}") from e
        if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
            raise DataError(f"{path} is not an sdfrecon checkpoint")
        return payload

    def restore(self, path: Optional[str] = None):
        """
        Rebuild the scene fields stored in a checkpoint.

        Returns:
            Tuple of (fields, config, bounds, payload)

        Raises:
            DataError: If there is no checkpoint or its networks do not match its config
        """
        from config import TrainConfig
        from models.fields import SceneFields

        path = path or self.latest()
        if path is None:
            raise DataError(f"no checkpoints in {self.directory}")
        payload = self.read(path)
        raw = payload['config']
        cfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
        fields = SceneFields.from_config(cfg.replace(sphere_refine_steps=0))
        if fields.digests() != payload['digests']:
            raise DataError(f"{path}: network shapes do not match the stored configuration")
        fields.load_state_dict(payload['fields'])
        bounds = Bounds(*payload['bounds'])
        logger.info(f"Restored checkpoint {path} (step {payload['step']}, beta={float(fields.beta):.4g})")
        return fields, cfg, bounds, payload
