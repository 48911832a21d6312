"""
Sparse depth service module for the geometry constraints.

Corners are detected with the Harris response, matched across nearby views
with normalised patch correlation and triangulated as the midpoint of the
common perpendicular of the two pixel rays. The distance along each ray to
its closest point becomes that ray's approximate depth.
"""

from __future__ import annotations

from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch

from errors import DataError, DomainError
from logger import get_logger
from models.mlp import DTYPE
from utils.geometry import IntersectionStatus, closest_points_between_rays, pixel_to_ray


logger = get_logger(__name__)

PATCH_RADIUS = 5
PATCH_SIZE = 2 * PATCH_RADIUS + 1
HARRIS_BLOCK_SIZE = 3
HARRIS_APERTURE = 3
HARRIS_K = 0.04
RESPONSE_FLOOR = 1e-12


@dataclass(eq=False)
class FeaturePoint:
    """
    Detected corner.

    Attributes:
        u, v (float): sub-pixel position in continuous pixel coordinates
        response (float): Harris response at the integer peak
        descriptor (np.ndarray): flattened 11x11 zero-mean unit-norm patch
    """
    u: float
    v: float
    response: float
    descriptor: np.ndarray


@dataclass(frozen=True)
class Correspondence:
    """
    A pixel in view ``view_a`` matched to a pixel in view ``view_b``.

    Attributes:
        view_a, view_b (int): view indices, distinct
        ua, va (float): pixel in view a
        ub, vb (float): pixel in view b
        score (float): NCC of the descriptors (NaN when unknown)
    """
    view_a: int
    view_b: int
    ua: float
    va: float
    ub: float
    vb: float
    score: float = float('nan')

    def __post_init__(self):
        if self.view_a == self.view_b:
            raise DomainError(f"a correspondence needs two distinct views, got {self.view_a} twice")

    def swapped(self) -> Correspondence:
        return Correspondence(self.view_b, self.view_a, self.ub, self.vb, self.ua, self.va, self.score)


@dataclass(frozen=True)
class DepthRecord:
    """Approximate depth of the ray through pixel ``(u, v)``."""
    u: float
    v: float
    depth: float
    gap: float


@dataclass
class TriangulationStats:
    """Outcome counts of one triangulation pass."""
    accepted: int = 0
    parallel: int = 0
    behind: int = 0
    large_gap: int = 0
    outside_image: int = 0

    @property
    def discarded(self) -> int:
        return self.parallel + self.behind + self.large_gap + self.outside_image


@dataclass
class SparseDepthMap:
    """
    Per-view approximate depths produced by triangulation.

    Attributes:
        records (dict): view index -> list of DepthRecord
        stats (TriangulationStats): counts of accepted and discarded matches
    """
    records: Dict[int, List[DepthRecord]] = field(default_factory=lambda: defaultdict(list))
    stats: TriangulationStats = field(default_factory=TriangulationStats)

    def add(self, view: int, u: float, v: float, depth: float, gap: float) -> None:
        if not depth > 0:
            raise DomainError(f"approximate depth must be positive, got {depth}")
        self.records.setdefault(view, []).append(DepthRecord(u, v, depth, gap))

    def views(self) -> List[int]:
        return sorted(v for v, recs in self.records.items() if recs)

    def for_view(self, view: int) -> List[DepthRecord]:
        return list(self.records.get(view, []))

    def __len__(self) -> int:
        return sum(len(recs) for recs in self.records.values())

    def as_arrays(self, view: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(pixels (K, 2), depths (K,), gaps (K,)) of one view."""
        recs = self.for_view(view)
        if not recs:
            return np.zeros((0, 2)), np.zeros(0), np.zeros(0)
        pixels = np.array([[r.u, r.v] for r in recs], dtype=np.float64)
        return pixels, np.array([r.depth for r in recs]), np.array([r.gap for r in recs])


def to_gray(image: np.ndarray) -> np.ndarray:
    """Grayscale float32 copy of an (H, W) or (H, W, 3) image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim == 3:
        return cv2.cvtColor(image.astype(np.float32), cv2.COLOR_RGB2GRAY)
    return image.astype(np.float32)


def detect_corners(
    image: np.ndarray,
    max_points: int = 400,
    nms_radius: int = 3,
    threshold_ratio: float = 0.01,
) -> List[FeaturePoint]:
    """
    Harris corners with non-maximum suppression and patch descriptors.

    Args:
        image: (H, W) grayscale or (H, W, 3) RGB image in [0, 1]
        max_points: keep at most this many strongest corners
        nms_radius: suppression half-window in pixels
        threshold_ratio: minimum response relative to the image maximum

    Returns:
        Corners sorted by decreasing response

    Raises:
        DomainError: If the image is empty
    """
    gray = to_gray(image)
    if gray.size == 0:
        raise DomainError("cannot detect corners in an empty image")
    h, w = gray.shape
    if h < PATCH_SIZE or w < PATCH_SIZE:
        logger.warning(f"Image {w}x{h} is smaller than the {PATCH_SIZE}x{PATCH_SIZE} descriptor patch")
        return []

    response = cv2.cornerHarris(gray, HARRIS_BLOCK_SIZE, HARRIS_APERTURE, HARRIS_K).astype(np.float64)
    peak = float(response.max())
    if peak <= RESPONSE_FLOOR:
        return []
    threshold = max(threshold_ratio * peak, RESPONSE_FLOOR)

    valid = np.zeros_like(response, dtype=bool)
    valid[PATCH_RADIUS:h - PATCH_RADIUS, PATCH_RADIUS:w - PATCH_RADIUS] = True
    rows, cols = np.nonzero(valid & (response > threshold))
    # strongest first, ties in raster order
    order = np.lexsort((cols, rows, -response[rows, cols]))

    suppressed = np.zeros_like(valid)
    gray64 = gray.astype(np.float64)
    points: List[FeaturePoint] = []
    for idx in order:
        r, c = int(rows[idx]), int(cols[idx])
        if suppressed[r, c]:
            continue
        suppressed[max(r - nms_radius, 0):r + nms_radius + 1, max(c - nms_radius, 0):c + nms_radius + 1] = True

        patch = gray64[r - PATCH_RADIUS:r + PATCH_RADIUS + 1, c - PATCH_RADIUS:c + PATCH_RADIUS + 1].ravel()
        patch = patch - patch.mean()
        norm = np.linalg.norm(patch)
        if norm < RESPONSE_FLOOR:
            continue
        du = _parabolic_offset(response[r, c - 1], response[r, c], response[r, c + 1])
        dv = _parabolic_offset(response[r - 1, c], response[r, c], response[r + 1, c])
        points.append(FeaturePoint(c + 0.5 + du, r + 0.5 + dv, float(response[r, c]), patch / norm))
        if len(points) >= max_points:
            break

    logger.debug(f"Detected {len(points)} corners (peak response {peak:.3e})")
    return points


def _parabolic_offset(left: float, centre: float, right: float) -> float:
    denom = left - 2.0 * centre + right
    if denom >= 0.0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def match_features(
    pts_a: Sequence[FeaturePoint],
    pts_b: Sequence[FeaturePoint],
    view_a: int = 0,
    view_b: int = 1,
    ratio: float = 0.9,
) -> List[Correspondence]:
    """
    Mutual-best NCC matching with a ratio test.

    The NCC distance of two descriptors is ``1 - <d_a, d_b>``. A pair is kept when
    each point is the other's nearest neighbour and the best distance is below
    ``ratio`` times the second best distance of the point in ``pts_a``.

    Returns:
        Correspondences ordered by index in ``pts_a``
    """
    if not pts_a or not pts_b:
        return []
    desc_a = np.stack([p.descriptor for p in pts_a])
    desc_b = np.stack([p.descriptor for p in pts_b])
    ncc = desc_a @ desc_b.T
    dist = 1.0 - ncc

    best_b = np.argmin(dist, axis=1)
    best_a = np.argmin(dist, axis=0)
    if dist.shape[1] > 1:
        second = np.partition(dist, 1, axis=1)[:, 1]
    else:
        second = np.full(dist.shape[0], np.inf)

    matches = []
    for i, j in enumerate(best_b):
        if best_a[j] != i:
            continue
        if not dist[i, j] < ratio * second[i]:
            continue
        pa, pb = pts_a[i], pts_b[j]
        matches.append(Correspondence(view_a, view_b, pa.u, pa.v, pb.u, pb.v, float(ncc[i, j])))
    return matches


def triangulate_matches(
    matches: Iterable[Correspondence],
    cams: Sequence,
    max_gap: float,
) -> SparseDepthMap:
    """
    Triangulate correspondences into per-view approximate depths.

    Each match becomes two pixel rays; their closest points give the midpoint and
    the gap. Parallel rays, intersections behind a camera and gaps above
    ``max_gap`` are discarded and counted. Accepted matches record the distance
    along each ray in both views.

    Raises:
        DataError: If a match references an unknown view
    """
    depth_map = SparseDepthMap()
    stats = depth_map.stats
    for m in matches:
        for view in (m.view_a, m.view_b):
            if not 0 <= view < len(cams):
                raise DataError(f"match references unknown view {view} ({len(cams)} views)")
        cam_a, cam_b = cams[m.view_a], cams[m.view_b]
        if not (cam_a.contains(m.ua, m.va) and cam_b.contains(m.ub, m.vb)):
            stats.outside_image += 1
            continue
        result = closest_points_between_rays(
            pixel_to_ray(cam_a, (m.ua, m.va)),
            pixel_to_ray(cam_b, (m.ub, m.vb)),
        )
        if result.status is IntersectionStatus.PARALLEL:
            stats.parallel += 1
        elif result.status is IntersectionStatus.BEHIND:
            stats.behind += 1
        elif result.gap > max_gap:
            stats.large_gap += 1
        else:
            depth_map.add(m.view_a, m.ua, m.va, result.t1, result.gap)
            depth_map.add(m.view_b, m.ub, m.vb, result.t2, result.gap)
            stats.accepted += 1

    logger.info(
        f"Triangulated {stats.accepted} matches; discarded {stats.parallel} parallel, "
        f"{stats.behind} behind camera, {stats.large_gap} above gap {max_gap:.4g}, "
        f"{stats.outside_image} outside image"
    )
    return depth_map


def geometry_loss(pred_depth: torch.Tensor, target_depth) -> torch.Tensor:
    """
    Sum of absolute differences between rendered and approximate depths.

    An empty match set gives a constant zero.
    """
    pred_depth = torch.as_tensor(pred_depth, dtype=DTYPE)
    target_depth = torch.as_tensor(target_depth, dtype=DTYPE)
    if pred_depth.shape != target_depth.shape:
        raise DomainError(
            f"depth lists differ in shape: {tuple(pred_depth.shape)} vs {tuple(target_depth.shape)}"
        )
    if pred_depth.numel() == 0:
        return torch.zeros((), dtype=DTYPE)
    return torch.abs(pred_depth - target_depth).sum()


def view_pairs(n_views: int, window: int) -> List[Tuple[int, int]]:
    """Index pairs ``(i, j)`` with ``0 < j - i <= window``."""
    return [(i, j) for i in range(n_views) for j in range(i + 1, min(n_views, i + window + 1))]


class SparseDepthService:
    """
    Service class producing approximate depths from a set of posed images.

    Attributes:
        max_corners (int): corners kept per view
        nms_radius (int): non-maximum suppression radius
        window (int): maximum view index distance of matched pairs
        workers (int): thread pool size for per-view and per-pair work
    """

    def __init__(self, max_corners: int = 400, nms_radius: int = 3, window: int = 2, workers: int = 1):
        self.max_corners = max_corners
        self.nms_radius = nms_radius
        self.window = window
        self.workers = max(1, workers)
        logger.info(
            f"SparseDepthService initialized (max_corners={max_corners}, "
            f"nms_radius={nms_radius}, window={window}, workers={self.workers})"
        )

    def detect(self, images: Sequence[np.ndarray]) -> List[List[FeaturePoint]]:
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            features = list(pool.map(
                lambda img: detect_corners(img, self.max_corners, self.nms_radius), images
            ))
        logger.info(f"Detected {sum(len(f) for f in features)} corners over {len(images)} views")
        return features

    def match(self, features: Sequence[Sequence[FeaturePoint]]) -> List[Correspondence]:
        pairs = view_pairs(len(features), self.window)
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            per_pair = list(pool.map(
                lambda ij: match_features(features[ij[0]], features[ij[1]], ij[0], ij[1]), pairs
            ))
        matches = [m for pair_matches in per_pair for m in pair_matches]
        logger.info(f"Matched {len(matches)} correspondences over {len(pairs)} view pairs")
        return matches

    def detect_and_match(self, images: Sequence[np.ndarray]) -> List[Correspondence]:
        return self.match(self.detect(images))

    def triangulate(
        self, matches: Iterable[Correspondence], cams: Sequence, max_gap: float
    ) -> SparseDepthMap:
        return triangulate_matches(matches, cams, max_gap)

    @staticmethod
    def max_gap_for(diagonal: float, fraction: float) -> float:
        """Gap threshold as a fraction of the scene box diagonal."""
        return fraction * diagonal


def filter_window(matches: Iterable[Correspondence], window: Optional[int]) -> List[Correspondence]:
    """Drop correspondences whose views are more than ``window`` indices apart."""
    if window is None:
        return list(matches)
    return [m for m in matches if abs(m.view_a - m.view_b) <= window]
