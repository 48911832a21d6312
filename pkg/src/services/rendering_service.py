"""
Rendering service module for differentiable volume rendering.

Signed distances are turned into densities with a Laplace CDF, rays are
sampled with stratified sampling and color, depth, normal and plane
probability are alpha-composited with the discrete transmittance weights.
Everything on the parameter path is a torch expression, so losses built on
the rendered quantities back-propagate into the three networks and log beta.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch

from errors import DomainError
from logger import get_logger
from models.fields import SceneFields, normalize_guarded
from models.mlp import DTYPE, DiffContext
from utils.geometry import Bounds, CameraModel, Ray, pixels_to_rays, ray_box_exit


logger = get_logger(__name__)

TERMINAL_DELTA_FLOOR = 1e-4
MIN_RAY_SPAN = 1e-3


def density_from_sdf(s, beta, literal: bool = False):
    """
    Laplace-CDF density of a signed distance.

    ``sigma(s) = Psi(-s) / beta`` with ``Psi`` the CDF of a zero-mean Laplace
    distribution of scale ``beta``: ``exp(-s/beta) / (2 beta)`` outside the
    surface and ``(1 - exp(s/beta) / 2) / beta`` inside, so density saturates at
    ``1/beta`` in solid matter. ``literal=True`` evaluates ``Psi(s) / beta``
    instead (density grows outside the surface).

    Args:
        s: signed distance(s), float or tensor
        beta: positive scale, float or tensor
        literal: use the unnegated argument

    Returns:
        Density with the type of ``s`` (float in, float out)

    Raises:
        DomainError: If beta <= 0
    """
    as_float = not isinstance(s, torch.Tensor) and not isinstance(beta, torch.Tensor)
    s_t = torch.as_tensor(s, dtype=DTYPE)
    beta_t = torch.as_tensor(beta, dtype=DTYPE)
    if not bool(torch.all(beta_t > 0)):
        raise DomainError(f"beta must be > 0, got {beta}")
    # Psi(a) per branch; exp only ever sees a non-positive argument
    a = s_t if literal else -s_t
    zero = torch.zeros_like(a)
    low = a <= 0
    tail = 0.5 * torch.exp(torch.where(low, a, zero) / beta_t)
    body = 1.0 - 0.5 * torch.exp(-torch.where(low, zero, a) / beta_t)
    sigma = torch.where(low, tail, body) / beta_t
    if as_float:
        return float(sigma) if sigma.dim() == 0 else sigma.numpy()
    return sigma


def stratified_samples(near, far, n_samples: int, rng=None) -> np.ndarray:
    """
    One uniform draw per equal sub-interval of ``[near, far]`` for every ray.

    Args:
        near: scalar or (R,) start distances, >= 0
        far: scalar or (R,) end distances, > near
        n_samples: samples per ray, >= 2
        rng: object with ``random(shape)`` (e.g. ``np.random.Generator``);
            None places every sample at its stratum midpoint

    Returns:
        (R, n_samples) strictly increasing distances

    Raises:
        DomainError: On invalid bounds or sample count
    """
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    near, far = np.broadcast_arrays(near, far)
    if n_samples < 2:
        raise DomainError(f"n_samples must be >= 2, got {n_samples}")
    if not (np.all(np.isfinite(near)) and np.all(np.isfinite(far))):
        raise DomainError("near/far must be finite")
    if np.any(near < 0) or np.any(far <= near):
        raise DomainError("sampling bounds must satisfy 0 <= near < far")

    shape = (near.shape[0], n_samples)
    u = np.full(shape, 0.5) if rng is None else np.asarray(rng.random(shape), dtype=np.float64)
    strata = (np.arange(n_samples)[None, :] + u) / n_samples
    return near[:, None] + strata * (far - near)[:, None]


def sample_ray(ray: Ray, near: float, far: float, n_samples: int, rng=None) -> np.ndarray:
    """Stratified sample distances along one ray, shape (n_samples,)."""
    return stratified_samples(near, far, n_samples, rng)[0]


def sample_deltas(t: torch.Tensor, far) -> torch.Tensor:
    """
    Spacing between consecutive samples.

    The last sample gets ``max(far - t_N, 1e-4)``.
    """
    far = torch.as_tensor(far, dtype=DTYPE)
    if far.dim() == 0:
        far = far.expand(t.shape[:-1])
    terminal = torch.clamp(far - t[..., -1], min=TERMINAL_DELTA_FLOOR)
    return torch.cat([t[..., 1:] - t[..., :-1], terminal[..., None]], dim=-1)


def compute_weights(sigma: torch.Tensor, delta: torch.Tensor):
    """
    Discrete volume rendering quadrature.

    ``T_i = exp(-sum_{j<i} sigma_j delta_j)`` and
    ``w_i = T_i (1 - exp(-sigma_i delta_i))`` along the last axis.

    Returns:
        Tuple of (transmittance, weights), same shape as ``sigma``
    """
    sigma = torch.as_tensor(sigma, dtype=DTYPE)
    delta = torch.as_tensor(delta, dtype=DTYPE)
    if sigma.shape != delta.shape:
        raise DomainError(f"sigma {tuple(sigma.shape)} and delta {tuple(delta.shape)} differ in shape")
    tau = sigma * delta
    exclusive = torch.cumsum(tau, dim=-1) - tau
    transmittance = torch.exp(-exclusive)
    weights = transmittance * -torch.expm1(-tau)
    return transmittance, weights


@dataclass
class RenderOutputs:
    """
    Per-ray accumulated quantities; leading dimension is the ray batch.

    Attributes:
        color (torch.Tensor): (R, 3) accumulated RGB
        depth (torch.Tensor): (R,) expected distance along the ray
        normal (torch.Tensor): (R, 3) normalised accumulated normal
        plane_prob (torch.Tensor): (R,) accumulated plane probability
        weights (torch.Tensor): (R, N) compositing weights
        transmittance (torch.Tensor): (R, N)
        opacity (torch.Tensor): (R,) sum of weights
        t (torch.Tensor): (R, N) sample distances
        points (torch.Tensor): (R, N, 3) sample positions
    """
    color: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    plane_prob: torch.Tensor
    weights: torch.Tensor
    transmittance: torch.Tensor
    opacity: torch.Tensor
    t: torch.Tensor
    points: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.depth.shape[0]

    def surface_points(self) -> torch.Tensor:
        """(R, 3) sample position with the largest weight on every ray."""
        idx = torch.argmax(self.weights, dim=-1)
        return self.points[torch.arange(len(self)), idx]


def composite(
    t: torch.Tensor,
    delta: torch.Tensor,
    sigma: torch.Tensor,
    colors: torch.Tensor,
    normals: torch.Tensor,
    plane_logits: torch.Tensor,
    points: Optional[torch.Tensor] = None,
    ctx: Optional[DiffContext] = None,
) -> RenderOutputs:
    """
    Accumulate per-sample field values into per-ray outputs.

    Args:
        t, delta, sigma: (R, N) distances, spacings and densities
        colors: (R, N, 3) per-sample RGB
        normals: (R, N, 3) per-sample unit normals
        plane_logits: (R, N) per-sample plane logits
        points: optional (R, N, 3) positions kept for later use
        ctx: receives the degenerate-normal count of the accumulated normal

    Returns:
        RenderOutputs
    """
    t = torch.as_tensor(t, dtype=DTYPE)
    transmittance, weights = compute_weights(sigma, delta)
    w = weights[..., None]
    color = (w * colors).sum(dim=-2)
    depth = (weights * t).sum(dim=-1)
    normal = normalize_guarded((w * normals).sum(dim=-2), ctx)
    plane_prob = (weights * torch.sigmoid(plane_logits)).sum(dim=-1)
    return RenderOutputs(
        color=color,
        depth=depth,
        normal=normal,
        plane_prob=plane_prob,
        weights=weights,
        transmittance=transmittance,
        opacity=weights.sum(dim=-1),
        t=t,
        points=points,
    )


def ray_far_bounds(
    origins: np.ndarray,
    directions: np.ndarray,
    bounds: Optional[Bounds],
    near: float,
    far_policy: str = 'box',
    far: float = 0.0,
    margin: float = 0.0,
) -> np.ndarray:
    """
    Per-ray far distance: exit from the scene box (``box``) or a constant (``fixed``).

    The box is padded by ``margin`` first. A surface lying on a box face only
    reaches full opacity from samples behind it. Box exits are floored at ``near + 1e-3`` so every ray keeps a sampling span.
    """
    n = len(np.asarray(origins).reshape(-1, 3))
    if far_policy == 'fixed' or bounds is None:
        if far <= near:
            raise DomainError(f"far ({far}) must exceed near ({near})")
        return np.full(n, float(far))
    box = bounds.padded(margin) if margin > 0 else bounds
    exit_t = ray_box_exit(origins, directions, box.lo, box.hi)
    return np.maximum(exit_t, near + MIN_RAY_SPAN)


def render_rays(
    fields: SceneFields,
    origins,
    directions,
    near,
    far,
    n_samples: int,
    rng=None,
    ctx: Optional[DiffContext] = None,
    density_literal: bool = False,
) -> RenderOutputs:
    """
    Render a batch of rays through the scene fields.

    Args:
        fields: scene fields
        origins: (R, 3) ray origins
        directions: (R, 3) unit directions
        near: scalar or (R,) near distances
        far: scalar or (R,) far distances
        n_samples: samples per ray
        rng: stratified jitter source; None samples stratum midpoints
        ctx: differentiation context
        density_literal: use the unnegated density argument

    Returns:
        RenderOutputs, differentiable w.r.t. all field parameters and log beta
    """
    ctx = ctx or DiffContext()
    origins = torch.as_tensor(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    directions = torch.as_tensor(np.asarray(directions, dtype=np.float64).reshape(-1, 3))
    n_rays = origins.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,)).copy()
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,)).copy()

    t = torch.as_tensor(stratified_samples(near, far, n_samples, rng))
    delta = sample_deltas(t, torch.as_tensor(far))
    points = origins[:, None, :] + t[..., None] * directions[:, None, :]
    view_dirs = directions[:, None, :].expand(-1, n_samples, -1)

    sample = fields.sample(points.reshape(-1, 3), view_dirs.reshape(-1, 3), ctx)
    sigma = density_from_sdf(sample.s.reshape(n_rays, n_samples), fields.beta, literal=density_literal)
    return composite(
        t,
        delta,
        sigma,
        sample.c.reshape(n_rays, n_samples, 3),
        sample.n.reshape(n_rays, n_samples, 3),
        sample.p.reshape(n_rays, n_samples),
        points=points,
        ctx=ctx,
    )


def render_ray(
    fields: SceneFields,
    ray: Ray,
    near: float,
    far: float,
    n_samples: int,
    rng=None,
    ctx: Optional[DiffContext] = None,
    density_literal: bool = False,
) -> RenderOutputs:
    """Render a single ray; outputs keep a leading batch dimension of 1."""
    return render_rays(
        fields, ray.origin[None], ray.direction[None], near, far, n_samples, rng, ctx, density_literal
    )


class RenderingService:
    """
    Renders whole views of trained scene fields for inspection.

    Attributes:
        fields (SceneFields): fields to render
        bounds (Bounds): scene box used for per-ray far bounds
        margin (float): padding of the box before ray exits are taken
        near (float): near distance
        n_samples (int): samples per ray
        chunk (int): rays rendered per forward pass
    """

    def __init__(
        self,
        fields: SceneFields,
        bounds: Bounds,
        near: float,
        n_samples: int,
        far_policy: str = 'box',
        far: float = 0.0,
        density_literal: bool = False,
        chunk: int = 2048,
        margin: float = 0.0,
    ):
        self.fields = fields
        self.bounds = bounds
        self.near = near
        self.n_samples = n_samples
        self.far_policy = far_policy
        self.far = far
        self.margin = margin
        self.density_literal = density_literal
        self.chunk = chunk
        logger.info(
            f"RenderingService initialized (near={near}, samples={n_samples}, "
            f"far_policy={far_policy}, margin={margin}, chunk={chunk})"
        )

    def render_view(self, cam: CameraModel) -> Dict[str, np.ndarray]:
        """
        Render every pixel of ``cam`` at stratum midpoints.

        Returns:
            Dictionary with ``color`` (H, W, 3), ``depth`` (H, W), ``normal``
            (H, W, 3), ``plane`` (H, W) and ``opacity`` (H, W) arrays
        """
        rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing='ij')
        pixels = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=-1)
        origins, directions = pixels_to_rays(cam, pixels)
        far = ray_far_bounds(origins, directions, self.bounds, self.near, self.far_policy, self.far, self.margin)

        parts = {'color': [], 'depth': [], 'normal': [], 'plane': [], 'opacity': []}
        ctx = DiffContext.inference()
        for start in range(0, len(pixels), self.chunk):
            sl = slice(start, start + self.chunk)
            with torch.no_grad():
                out = render_rays(
                    self.fields, origins[sl], directions[sl], self.near, far[sl],
                    self.n_samples, None, ctx, self.density_literal,
                )
            parts['color'].append(out.color.detach().numpy())
            parts['depth'].append(out.depth.detach().numpy())
            parts['normal'].append(out.normal.detach().numpy())
            parts['plane'].append(out.plane_prob.detach().numpy())
            parts['opacity'].append(out.opacity.detach().numpy())

        h, w = cam.height, cam.width
        images = {
            'color': np.concatenate(parts['color']).reshape(h, w, 3),
            'depth': np.concatenate(parts['depth']).reshape(h, w),
            'normal': np.concatenate(parts['normal']).reshape(h, w, 3),
            'plane': np.concatenate(parts['plane']).reshape(h, w),
            'opacity': np.concatenate(parts['opacity']).reshape(h, w),
        }
        if ctx.degenerate_normals:
            logger.warning(f"{ctx.degenerate_normals} degenerate normals while rendering view")
        logger.info(
            f"Rendered {w}x{h} view: mean opacity {images['opacity'].mean():.3f}, "
            f"mean depth {images['depth'].mean():.3f}"
        )
        return images
