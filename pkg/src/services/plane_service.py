"""
Plane service module for the plane constraints.

Images are over-segmented with the greedy graph-based Felzenszwalb algorithm,
segments covering a sufficient share of the image are kept as large planes,
and rendered normals inside them are pulled towards being parallel or
orthogonal to the floor normal.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import cv2
import numpy as np
import torch

from errors import DomainError
from logger import get_logger
from models.mlp import DTYPE


logger = get_logger(__name__)

PROB_EPS = 1e-6


class DisjointSet:
    """
    Union-find over pixel indices with the per-component bookkeeping of the
    graph segmentation: component size and merge threshold ``Int(C) + k/|C|``.
    """

    def __init__(self, n: int, k: float):
        self.parent = list(range(n))
        self.rank = [0] * n
        self.size = [1] * n
        self.threshold = [k] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        """Join the components rooted at ``a`` and ``b``; returns the new root."""
        if self.rank[a] < self.rank[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        if self.rank[a] == self.rank[b]:
            self.rank[a] += 1
        return a


@dataclass(eq=False)
class SegmentLabelMap:
    """
    Partition of an image into 4-connected segments.

    Attributes:
        labels (np.ndarray): (H, W) int32 segment ids, numbered in raster order
            of first appearance
        sizes (np.ndarray): (S,) pixel count per segment
    """
    labels: np.ndarray
    sizes: np.ndarray

    @property
    def num_segments(self) -> int:
        return len(self.sizes)

    @property
    def num_pixels(self) -> int:
        return int(self.labels.size)


@dataclass(eq=False)
class PlaneMask:
    """
    Pixels belonging to large-plane segments.

    Attributes:
        mask (np.ndarray): (H, W) bool
        kept (np.ndarray): sorted ids of the kept segments
    """
    mask: np.ndarray
    kept: np.ndarray

    @property
    def fraction(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


def _grid_edges(image: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """8-connected grid edges as (a, b, weight) with Euclidean color distances."""
    h, w = image.shape[:2]
    index = np.arange(h * w).reshape(h, w)
    a_parts, b_parts = [], []
    # right, down, down-right, down-left
    for (a_sl, b_sl) in (
        ((slice(None), slice(0, w - 1)), (slice(None), slice(1, w))),
        ((slice(0, h - 1), slice(None)), (slice(1, h), slice(None))),
        ((slice(0, h - 1), slice(0, w - 1)), (slice(1, h), slice(1, w))),
        ((slice(0, h - 1), slice(1, w)), (slice(1, h), slice(0, w - 1))),
    ):
        a_parts.append(index[a_sl].ravel())
        b_parts.append(index[b_sl].ravel())
    a = np.concatenate(a_parts)
    b = np.concatenate(b_parts)
    flat = image.reshape(h * w, -1)
    weights = np.sqrt(np.sum((flat[a] - flat[b]) ** 2, axis=-1))
    return a, b, weights


def felzenszwalb_segment(
    image: np.ndarray,
    k: float = 500.0,
    min_size: int = 20,
    presmooth_sigma: float = 0.8,
) -> SegmentLabelMap:
    """
    Greedy graph-based segmentation.

    The image (RGB in [0, 1], treated on the 0..255 scale) is Gaussian smoothed,
    an 8-connected grid graph is built and edges are processed by ascending
    weight, ties by edge index. Two components merge when the edge weight does not
    exceed ``min(Int(C1) + k/|C1|, Int(C2) + k/|C2|)``. Components smaller than
    ``min_size`` are then merged along the cheapest remaining edges, and every
    segment is split into its 4-connected pieces.

    Args:
        image: (H, W, 3) or (H, W) image in [0, 1]
        k: scale parameter (larger favours larger segments)
        min_size: minimum component size after post-merging
        presmooth_sigma: Gaussian pre-smoothing std in pixels (0 disables)

    Returns:
        SegmentLabelMap

    Raises:
        DomainError: If the image is empty or k <= 0
    """
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0 or image.ndim < 2 or min(image.shape[:2]) == 0:
        raise DomainError("cannot segment an empty image")
    if k <= 0:
        raise DomainError(f"k must be > 0, got {k}")
    if image.ndim == 2:
        image = image[..., None]
    h, w = image.shape[:2]

    scaled = image * 255.0
    if presmooth_sigma > 0:
        scaled = cv2.GaussianBlur(scaled, (0, 0), presmooth_sigma)
        if scaled.ndim == 2:
            scaled = scaled[..., None]

    a, b, weights = _grid_edges(scaled)
    order = np.argsort(weights, kind='stable')
    a, b, weights = a[order].tolist(), b[order].tolist(), weights[order].tolist()

    ds = DisjointSet(h * w, k)
    for ea, eb, wt in zip(a, b, weights):
        ra, rb = ds.find(ea), ds.find(eb)
        if ra == rb:
            continue
        if wt <= ds.threshold[ra] and wt <= ds.threshold[rb]:
            root = ds.union(ra, rb)
            ds.threshold[root] = wt + k / ds.size[root]

    for ea, eb in zip(a, b):
        ra, rb = ds.find(ea), ds.find(eb)
        if ra != rb and (ds.size[ra] < min_size or ds.size[rb] < min_size):
            ds.union(ra, rb)

    roots = np.fromiter((ds.find(i) for i in range(h * w)), dtype=np.int64, count=h * w).reshape(h, w)
    labels = _split_four_connected(roots)
    labels = _raster_order(labels)
    sizes = np.bincount(labels.ravel())
    logger.debug(f"Segmented {w}x{h} image into {len(sizes)} segments (k={k}, min_size={min_size})")
    return SegmentLabelMap(labels=labels.astype(np.int32), sizes=sizes)


def _split_four_connected(roots: np.ndarray) -> np.ndarray:
    """Give every 4-connected piece of every component its own id."""
    out = np.zeros(roots.shape, dtype=np.int64)
    next_id = 0
    for root in np.unique(roots):
        mask = (roots == root).astype(np.uint8)
        count, pieces = cv2.connectedComponents(mask, connectivity=4)
        inside = mask.astype(bool)
        out[inside] = pieces[inside] - 1 + next_id
        next_id += count - 1
    return out


def _raster_order(labels: np.ndarray) -> np.ndarray:
    flat = labels.ravel()
    _, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    remap = np.empty(len(first), dtype=np.int64)
    remap[np.argsort(first)] = np.arange(len(first))
    return remap[inverse].reshape(labels.shape)


def filter_large_planes(labels: SegmentLabelMap, min_fraction: float = 0.01) -> PlaneMask:
    """
    Flag pixels of segments covering at least ``min_fraction`` of the image.

    Raises:
        DomainError: If min_fraction is not in (0, 1)
    """
    if not 0.0 < min_fraction < 1.0:
        raise DomainError(f"min_fraction must be in (0, 1), got {min_fraction}")
    kept = np.nonzero(labels.sizes >= min_fraction * labels.num_pixels)[0]
    mask = np.isin(labels.labels, kept)
    return PlaneMask(mask=mask, kept=kept)


def plane_loss(normals: torch.Tensor, floor_normal=(0.0, 0.0, 1.0)) -> torch.Tensor:
    """
    Distance of ``N . n_f`` to the nearest of {-1, 0, 1}, per normal.

    Zero when a normal is parallel or orthogonal to the floor normal; never above 0.5.

    Args:
        normals: (..., 3) unit normals
        floor_normal: unit up vector

    Returns:
        (...) per-normal loss
    """
    normals = torch.as_tensor(normals, dtype=DTYPE)
    n_f = torch.as_tensor(floor_normal, dtype=DTYPE)
    d = (normals * n_f).sum(dim=-1)
    candidates = torch.stack([torch.abs(d + 1.0), torch.abs(d), torch.abs(d - 1.0)], dim=-1)
    return candidates.min(dim=-1).values


def joint_loss(
    plane_prob: torch.Tensor,
    plane_losses: torch.Tensor,
    mask,
    full_bce: bool = False,
    eps: float = PROB_EPS,
) -> torch.Tensor:
    """
    Plane-probability weighted normal loss plus the probability term.

    ``sum_{r in P} P(r) * L_pla(r) - sum_r M(r) log P(r)`` where ``P`` is the rendered
    plane probability clamped to ``[eps, 1 - eps]`` and ``M`` the segmentation mask.
    ``full_bce`` adds the negative-class term ``-sum_r (1 - M(r)) log(1 - P(r))``.
    Gradients flow through both ``plane_prob`` and ``plane_losses``.

    Args:
        plane_prob: (R,) rendered plane probabilities
        plane_losses: (R,) per-ray normal loss
        mask: (R,) segmentation flags in {0, 1}
        full_bce: include the negative-class term
        eps: probability clamp

    Returns:
        Scalar loss
    """
    prob = torch.clamp(torch.as_tensor(plane_prob, dtype=DTYPE), eps, 1.0 - eps)
    plane_losses = torch.as_tensor(plane_losses, dtype=DTYPE)
    m = torch.as_tensor(mask, dtype=DTYPE)
    weighted = (m * prob * plane_losses).sum()
    probability = -(m * torch.log(prob)).sum()
    if full_bce:
        probability = probability - ((1.0 - m) * torch.log1p(-prob)).sum()
    return weighted + probability


class PlaneSegmentationService:
    """
    Service class producing large-plane masks for every view.

    Attributes:
        k (float): segmentation scale
        min_size (int): minimum segment size
        sigma (float): pre-smoothing std
        min_fraction (float): share of the image a kept segment must cover
        workers (int): thread pool size
    """

    def __init__(
        self,
        k: float = 500.0,
        min_size: int = 20,
        sigma: float = 0.8,
        min_fraction: float = 0.01,
        workers: int = 1,
    ):
        if not 0.0 < min_fraction < 1.0:
            raise DomainError(f"min_fraction must be in (0, 1), got {min_fraction}")
        self.k = k
        self.min_size = min_size
        self.sigma = sigma
        self.min_fraction = min_fraction
        self.workers = max(1, workers)
        logger.info(
            f"PlaneSegmentationService initialized (k={k}, min_size={min_size}, "
            f"sigma={sigma}, min_fraction={min_fraction})"
        )

    def segment(self, images: Sequence[np.ndarray]) -> List[SegmentLabelMap]:
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(
                lambda img: felzenszwalb_segment(img, self.k, self.min_size, self.sigma), images
            ))

    def plane_masks(self, images: Sequence[np.ndarray]) -> Tuple[List[SegmentLabelMap], List[PlaneMask]]:
        segments = self.segment(images)
        masks = [filter_large_planes(s, self.min_fraction) for s in segments]
        if masks:
            coverage = np.mean([m.fraction for m in masks])
            logger.info(
                f"Segmented {len(images)} views: {np.mean([s.num_segments for s in segments]):.1f} "
                f"segments per view, {coverage:.1%} of pixels on large planes"
            )
        return segments, masks
