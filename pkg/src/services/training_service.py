"""
Training service module for optimising the scene fields.

Each iteration draws a batch of pixel rays (biased towards pixels with an
approximate depth early on), renders them, assembles the color, geometry,
joint plane and Eikonal losses with the scheduled geometry weight and applies
one Adam step.
"""

from __future__ import annotations

import csv
import os
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from config import TrainConfig, config
from errors import DomainError, NumericalError
from logger import get_logger, run_log_file
from models.fields import SceneFields
from models.mlp import DTYPE, DiffContext, adam_step, input_gradient, make_adam
from services.plane_service import PlaneMask, PlaneSegmentationService, joint_loss, plane_loss
from services.rendering_service import RenderOutputs, ray_far_bounds, render_rays
from services.sparse_depth_service import (
    SparseDepthMap,
    SparseDepthService,
    filter_window,
    geometry_loss,
)
from utils.dataModel import Dataset, RunDir
from utils.geometry import Bounds, pixels_to_rays
from utils.tools import CheckpointStore


logger = get_logger(__name__)

LOG_COLUMNS = ('iter', 'L_c', 'L_geo', 'L_j', 'L_eik', 'total', 'beta', 'lambda_geo')


@dataclass(eq=False)
class RayBatch:
    """
    Training rays with their supervision.

    Attributes:
        origins, directions (np.ndarray): (R, 3) rays
        colors (np.ndarray): (R, 3) ground-truth pixel colors
        depth (np.ndarray): (R,) approximate ray depth, NaN where unknown
        plane_mask (np.ndarray): (R,) 1 for pixels on a large-plane segment
        views (np.ndarray): (R,) view index
        pixels (np.ndarray): (R, 2) continuous pixel coordinates
        far (np.ndarray): (R,) far sampling bound
        n_matched (int): rays drawn from pixels with an approximate depth
    """
    origins: np.ndarray
    directions: np.ndarray
    colors: np.ndarray
    depth: np.ndarray
    plane_mask: np.ndarray
    views: np.ndarray
    pixels: np.ndarray
    far: np.ndarray
    n_matched: int = 0

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def has_depth(self) -> np.ndarray:
        return np.isfinite(self.depth)


class PixelPool:
    """
    Flattened per-pixel supervision of a dataset, built once per run.

    Matched entries are the sub-pixel positions carrying an approximate depth;
    their color and plane bit come from the pixel containing them.
    """

    def __init__(
        self,
        dataset: Dataset,
        sparse_depth: Optional[SparseDepthMap],
        plane_masks: Optional[Sequence[PlaneMask]],
        depth_source: str,
    ):
        self.dataset = dataset
        self.depth_source = depth_source
        self.colors = [v.image for v in dataset.views]
        self.plane = [
            plane_masks[i].mask.astype(np.float64) if plane_masks is not None
            else np.zeros(v.image.shape[:2])
            for i, v in enumerate(dataset.views)
        ]
        self.dense = [v.depth for v in dataset.views] if depth_source == 'dense' else None
        if depth_source == 'dense' and not dataset.has_depth:
            raise DomainError("depth_source=dense needs depth images in the dataset")

        views, pixels, depths = [], [], []
        if depth_source == 'sparse' and sparse_depth is not None:
            for view in sparse_depth.views():
                px, d, _ = sparse_depth.as_arrays(view)
                views.append(np.full(len(d), view))
                pixels.append(px)
                depths.append(d)
        self.matched_views = np.concatenate(views).astype(np.int64) if views else np.zeros(0, dtype=np.int64)
        self.matched_pixels = np.concatenate(pixels) if pixels else np.zeros((0, 2))
        self.matched_depth = np.concatenate(depths) if depths else np.zeros(0)

    @property
    def n_matched(self) -> int:
        return len(self.matched_depth)

    def lookup(self, views: np.ndarray, pixels: np.ndarray):
        """Colors, plane bits and dense depths at the pixels containing ``pixels``."""
        colors = np.empty((len(views), 3))
        plane = np.empty(len(views))
        dense = np.full(len(views), np.nan)
        for view in np.unique(views):
            sel = views == view
            h, w = self.colors[view].shape[:2]
            cols = np.clip(np.floor(pixels[sel, 0]).astype(np.int64), 0, w - 1)
            rows = np.clip(np.floor(pixels[sel, 1]).astype(np.int64), 0, h - 1)
            colors[sel] = self.colors[view][rows, cols]
            plane[sel] = self.plane[view][rows, cols]
            if self.dense is not None:
                d = self.dense[view][rows, cols]
                dense[sel] = np.where(d > 0, d, np.nan)
        return colors, plane, dense


def sample_batch(
    dataset: Dataset,
    sparse_depth: Optional[SparseDepthMap],
    plane_masks: Optional[Sequence[PlaneMask]],
    iteration: int,
    rng: np.random.Generator,
    cfg: TrainConfig,
    pool: Optional[PixelPool] = None,
) -> RayBatch:
    """
    Draw one training batch.

    A share ``cfg.matched_fraction_at(iteration)`` of the rays goes through
    pixels with an approximate depth, the rest through uniformly drawn pixel
    centres. Without matched pixels the whole batch is uniform.
    """
    if len(dataset) == 0:
        raise DomainError("cannot sample rays from an empty dataset")
    pool = pool or PixelPool(dataset, sparse_depth, plane_masks, cfg.depth_source)
    n = cfg.batch_rays

    n_matched = 0
    if pool.n_matched:
        n_matched = int(round(cfg.matched_fraction_at(iteration) * n))
    elif cfg.depth_source == 'sparse' and iteration == 0:
        logger.warning("No matched pixels available, sampling rays uniformly")

    pick = rng.integers(pool.n_matched, size=n_matched) if n_matched else np.zeros(0, dtype=np.int64)
    rand_views = rng.integers(len(dataset), size=n - n_matched)
    h, w = dataset.views[0].image.shape[:2]
    rand_rows = rng.integers(h, size=n - n_matched)
    rand_cols = rng.integers(w, size=n - n_matched)

    views = np.concatenate([pool.matched_views[pick], rand_views]).astype(np.int64)
    pixels = np.concatenate([
        pool.matched_pixels[pick],
        np.stack([rand_cols + 0.5, rand_rows + 0.5], axis=-1),
    ])
    colors, plane, dense = pool.lookup(views, pixels)
    if cfg.depth_source == 'sparse':
        depth = np.concatenate([pool.matched_depth[pick], np.full(n - n_matched, np.nan)])
    elif cfg.depth_source == 'dense':
        depth = dense
    else:
        depth = np.full(n, np.nan)

    origins = np.empty((n, 3))
    directions = np.empty((n, 3))
    for view in np.unique(views):
        sel = views == view
        origins[sel], directions[sel] = pixels_to_rays(dataset.views[view].camera, pixels[sel])
    far = ray_far_bounds(
        origins, directions, dataset.bounds, cfg.near, cfg.far_policy, cfg.far, cfg.scene_radius
    )
    return RayBatch(origins, directions, colors, depth, plane, views, pixels, far, n_matched)


def color_loss(pred: torch.Tensor, target) -> torch.Tensor:
    """Sum over rays of the L1 color error."""
    pred = torch.as_tensor(pred, dtype=DTYPE)
    target = torch.as_tensor(target, dtype=DTYPE)
    return torch.abs(pred - target).sum()


def eikonal_loss(
    fields: SceneFields,
    n_uniform: int,
    n_near_surface: int,
    rng: np.random.Generator,
    ctx: Optional[DiffContext] = None,
    bounds: Optional[Bounds] = None,
    surface_points: Optional[np.ndarray] = None,
    noise: float = 0.01,
) -> torch.Tensor:
    """
    Sum of ``(|grad f_g(x)| - 1)^2`` over uniform and near-surface points.

    Uniform points are drawn in ``bounds``; near-surface points are drawn from
    ``surface_points`` and perturbed with Gaussian noise of std
    ``noise * bounds.diagonal``.

    Raises:
        DomainError: On negative counts
    """
    if n_uniform < 0 or n_near_surface < 0:
        raise DomainError("eikonal sample counts must be >= 0")
    bounds = bounds or Bounds(-np.ones(3), np.ones(3))
    parts = []
    if n_uniform:
        parts.append(bounds.lo + rng.random((n_uniform, 3)) * bounds.extent)
    if n_near_surface and surface_points is not None and len(surface_points):
        surface_points = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
        pick = rng.integers(len(surface_points), size=n_near_surface)
        jitter = rng.normal(scale=noise * bounds.diagonal, size=(n_near_surface, 3))
        parts.append(surface_points[pick] + jitter)
    if not parts:
        return torch.zeros((), dtype=DTYPE)
    points = torch.as_tensor(np.concatenate(parts))
    _, grad = input_gradient(fields.geometry, points, 0, ctx)
    return ((grad.norm(dim=-1) - 1.0) ** 2).sum()


@dataclass
class LossBreakdown:
    """
    Loss terms of one batch.

    Attributes:
        color, geometry, joint, eikonal (torch.Tensor): unweighted terms
        total (torch.Tensor): weighted sum
        lambda_geo (float): geometry weight used
        counts (dict): rays or points contributing to each term
    """
    color: torch.Tensor
    geometry: torch.Tensor
    joint: torch.Tensor
    eikonal: torch.Tensor
    total: torch.Tensor
    lambda_geo: float
    counts: Dict[str, int] = field(default_factory=dict)

    def row(self, iteration: int, beta: float) -> List[float]:
        return [
            iteration, float(self.color), float(self.geometry), float(self.joint),
            float(self.eikonal), float(self.total), beta, self.lambda_geo,
        ]


def total_loss(
    terms: Dict[str, torch.Tensor],
    cfg: TrainConfig,
    iteration: int,
    counts: Optional[Dict[str, int]] = None,
) -> LossBreakdown:
    """
    Weighted sum ``lambda_c L_c + lambda_geo(it) L_geo + lambda_j L_j + lambda_eik L_eik``.

    Args:
        terms: 'color', 'geometry', 'joint' and 'eikonal' scalar tensors
        cfg: loss weights and schedule
        iteration: current iteration for the geometry weight

    Raises:
        NumericalError: Naming the first non-finite term
    """
    names = ('color', 'geometry', 'joint', 'eikonal')
    values = {name: torch.as_tensor(terms.get(name, 0.0), dtype=DTYPE) for name in names}
    for name in names:
        if not bool(torch.isfinite(values[name]).all()):
            logger.error(f"Non-finite {name} loss at iteration {iteration}")
            raise NumericalError(f"non-finite {name} loss at iteration {iteration}", term=name)
    lambda_geo = cfg.lambda_geo_at(iteration)
    total = (
        cfg.lambda_c * values['color']
        + lambda_geo * values['geometry']
        + cfg.lambda_j * values['joint']
        + cfg.lambda_eik * values['eikonal']
    )
    return LossBreakdown(
        color=values['color'],
        geometry=values['geometry'],
        joint=values['joint'],
        eikonal=values['eikonal'],
        total=total,
        lambda_geo=lambda_geo,
        counts=dict(counts or {}),
    )


def batch_losses(
    fields: SceneFields,
    batch: RayBatch,
    cfg: TrainConfig,
    iteration: int,
    rng: np.random.Generator,
    bounds: Bounds,
    ctx: Optional[DiffContext] = None,
) -> LossBreakdown:
    """Render ``batch`` and assemble every loss term."""
    ctx = ctx or DiffContext()
    out: RenderOutputs = render_rays(
        fields, batch.origins, batch.directions, cfg.near, batch.far,
        cfg.samples_per_ray, rng, ctx, cfg.density_literal,
    )
    zero = torch.zeros((), dtype=DTYPE)
    terms = {'color': color_loss(out.color, batch.colors)}
    counts = {'rays': len(batch)}

    has_depth = batch.has_depth
    counts['depth_rays'] = int(has_depth.sum())
    if cfg.depth_source != 'none' and cfg.lambda_geo_at(iteration) > 0 and has_depth.any():
        sel = torch.as_tensor(np.nonzero(has_depth)[0])
        terms['geometry'] = geometry_loss(out.depth[sel], batch.depth[has_depth])
    else:
        terms['geometry'] = zero

    counts['plane_rays'] = int(batch.plane_mask.sum())
    if cfg.lambda_j > 0:
        per_ray = plane_loss(out.normal, cfg.floor_normal)
        terms['joint'] = joint_loss(out.plane_prob, per_ray, batch.plane_mask, cfg.plane_bce_full)
    else:
        terms['joint'] = zero

    if cfg.lambda_eik > 0:
        surface = out.surface_points().detach().numpy()
        terms['eikonal'] = eikonal_loss(
            fields, cfg.eikonal_uniform, cfg.eikonal_near_surface, rng, ctx, bounds, surface, cfg.eikonal_noise
        )
        counts['eikonal_points'] = cfg.eikonal_uniform + cfg.eikonal_near_surface
    else:
        terms['eikonal'] = zero
    return total_loss(terms, cfg, iteration, counts)


class TrainingLog:
    """Append-only CSV of per-iteration losses."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.rows: List[List[float]] = []
        if path is not None:
            with open(path, 'w', newline='') as f:
                csv.writer(f).writerow(LOG_COLUMNS)

    def append(self, row: List[float]) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, 'a', newline='') as f:
                csv.writer(f).writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])

    def column(self, name: str) -> np.ndarray:
        idx = LOG_COLUMNS.index(name)
        return np.array([row[idx] for row in self.rows])

    @staticmethod
    def read(path: str) -> Dict[str, np.ndarray]:
        with open(path, 'r', newline='') as f:
            reader = csv.DictReader(f)
            rows = list(reader)
        return {name: np.array([float(r[name]) for r in rows]) for name in LOG_COLUMNS}


@dataclass(eq=False)
class TrainResult:
    fields: SceneFields
    log: TrainingLog
    checkpoint: Optional[str] = None


@contextmanager
def deterministic_algorithms(enabled: bool):
    """Use torch's deterministic kernels inside the block; the previous mode is restored on exit."""
    previous = torch.are_deterministic_algorithms_enabled()
    warn_only = torch.is_deterministic_algorithms_warn_only_enabled()
    if enabled:
        torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous, warn_only=warn_only)


class TrainingService:
    """
    Service class running the optimisation for one dataset.

    Attributes:
        cfg (TrainConfig): experiment configuration
        workers (int): worker cap for preprocessing
        show_progress (bool): display a tqdm progress bar
    """

    def __init__(self, cfg: TrainConfig, workers: Optional[int] = None, show_progress: Optional[bool] = None):
        cfg.validate()
        self.cfg = cfg
        self.workers = workers or config.threads
        self.show_progress = config.show_progress if show_progress is None else show_progress
        logger.info(f"TrainingService initialized with {cfg}")

    def prepare(self, dataset: Dataset):
        """
        Approximate depths and plane masks for ``dataset``.

        Returns:
            Tuple of (SparseDepthMap or None, plane masks or None)
        """
        cfg = self.cfg
        sparse_depth = None
        if cfg.depth_source == 'sparse':
            depth_service = SparseDepthService(cfg.max_corners, cfg.nms_radius, cfg.match_window, self.workers)
            if dataset.matches:
                matches = filter_window(dataset.matches, cfg.match_window)
                logger.info(f"Using {len(matches)} supplied correspondences")
            else:
                matches = depth_service.detect_and_match(dataset.images)
            max_gap = SparseDepthService.max_gap_for(dataset.bounds.diagonal, cfg.max_gap_fraction)
            sparse_depth = depth_service.triangulate(matches, dataset.cameras, max_gap)

        plane_masks = None
        if cfg.lambda_j > 0:
            plane_service = PlaneSegmentationService(
                cfg.seg_k, cfg.seg_min_size, cfg.seg_sigma, cfg.plane_min_fraction, self.workers
            )
            _, plane_masks = plane_service.plane_masks(dataset.images)
        return sparse_depth, plane_masks

    def train(
        self,
        dataset: Dataset,
        run_dir: Optional[RunDir] = None,
        sparse_depth: Optional[SparseDepthMap] = None,
        plane_masks: Optional[Sequence[PlaneMask]] = None,
        prepared: bool = False,
    ) -> TrainResult:
        """
        Optimise fresh scene fields on ``dataset``.

        The configuration snapshot is written before the first step, checkpoints
        every ``checkpoint_interval`` steps and after the last one. With a run
        directory the package log is also mirrored into its ``run.log``.

        Raises:
            NumericalError: If a loss term, gradient or beta becomes non-finite;
                checkpoints written so far are kept
        """
        if not prepared:
            sparse_depth, plane_masks = self.prepare(dataset)
        log_file = run_log_file(run_dir.run_log) if run_dir is not None else nullcontext()
        with deterministic_algorithms(self.cfg.deterministic), log_file:
            return self._optimise(dataset, run_dir, sparse_depth, plane_masks)

    def _optimise(
        self,
        dataset: Dataset,
        run_dir: Optional[RunDir],
        sparse_depth: Optional[SparseDepthMap],
        plane_masks: Optional[Sequence[PlaneMask]],
    ) -> TrainResult:
        cfg = self.cfg
        torch.manual_seed(cfg.seed)
        rng = np.random.default_rng(cfg.seed)

        store = None
        if run_dir is not None:
            run_dir.create()
            cfg.dump(run_dir.config)
            run_dir.write_run_info(dataset.root, dataset.bounds)
            store = CheckpointStore(run_dir.checkpoints)
        log = TrainingLog(run_dir.log if run_dir is not None else None)

        fields = SceneFields.from_config(cfg)
        optimizer = make_adam(fields.parameters(), cfg.learning_rate)
        names = {id(p): name for name, p in fields.named_parameters()}
        pool = PixelPool(dataset, sparse_depth, plane_masks, cfg.depth_source)
        logger.info(
            f"Training {cfg.iterations} iterations on {len(dataset)} views "
            f"({pool.n_matched} pixels with approximate depth)"
        )

        checkpoint = None
        progress = tqdm(range(cfg.iterations), desc='train', disable=not self.show_progress)
        for it in progress:
            batch = sample_batch(dataset, sparse_depth, plane_masks, it, rng, cfg, pool)
            ctx = DiffContext()
            breakdown = batch_losses(fields, batch, cfg, it, rng, dataset.bounds, ctx)

            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            adam_step(optimizer, names)
            if not bool(torch.isfinite(fields.log_beta)):
                logger.error(f"log beta became non-finite at iteration {it}")
                raise NumericalError(f"non-finite beta at iteration {it}", term='beta')

            beta = float(fields.beta.detach())
            log.append(breakdown.row(it, beta))
            if it % cfg.log_interval == 0 or it == cfg.iterations - 1:
                logger.info(
                    f"iter {it}: L_c={float(breakdown.color):.4f} L_geo={float(breakdown.geometry):.4f} "
                    f"L_j={float(breakdown.joint):.4f} L_eik={float(breakdown.eikonal):.4f} "
                    f"total={float(breakdown.total):.4f} beta={beta:.4g} "
                    f"lambda_geo={breakdown.lambda_geo:.3f}"
                )
                progress.set_postfix(loss=f"{float(breakdown.total):.4f}", beta=f"{beta:.3g}")
            if ctx.degenerate_normals:
                logger.debug(f"iter {it}: {ctx.degenerate_normals} degenerate normals")

            step = it + 1
            if store is not None and (step % cfg.checkpoint_interval == 0 or step == cfg.iterations):
                checkpoint = store.save(step, fields, optimizer, cfg, dataset.bounds)

        logger.info(f"Training finished, final beta={float(fields.beta.detach()):.4g}")
        return TrainResult(fields=fields, log=log, checkpoint=checkpoint)


def train(dataset: Dataset, cfg: TrainConfig, run_dir: Optional[RunDir] = None) -> TrainResult:
    """Convenience wrapper: preprocess ``dataset`` and optimise fresh fields."""
    return TrainingService(cfg).train(dataset, run_dir)


def run_dir_for(path: str) -> RunDir:
    return RunDir(os.path.abspath(path))
