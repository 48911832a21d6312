"""
Scene fields: the signed distance, color and plane-probability networks plus
the learnable density sharpness beta.

The geometry network returns ``(s, z)`` where ``s`` is the signed distance
(negative inside solid matter) and ``z`` a feature vector shared with the color
network. Normals are the normalised spatial gradient of ``s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
from torch import nn

from errors import ConfigError
from logger import get_logger
from models.mlp import (
    DTYPE,
    DiffContext,
    Mlp,
    MlpSpec,
    forward,
    input_gradient,
    positional_encoding,
    sphere_init,
)


logger = get_logger(__name__)

NORMAL_EPS = 1e-8


@dataclass
class FieldSample:
    """
    Field values at a batch of points.

    Attributes:
        s (torch.Tensor): (N,) signed distance
        z (torch.Tensor): (N, F) geometry features
        grad (torch.Tensor): (N, 3) raw spatial gradient of ``s``
        n (torch.Tensor): (N, 3) unit normal
        c (torch.Tensor): (N, 3) RGB in [0, 1], None when color was not requested
        p (torch.Tensor): (N,) plane logit, None when not requested
    """
    s: torch.Tensor
    z: torch.Tensor
    grad: torch.Tensor
    n: torch.Tensor
    c: Optional[torch.Tensor] = None
    p: Optional[torch.Tensor] = None


def normalize_guarded(grad: torch.Tensor, ctx: Optional[DiffContext] = None) -> torch.Tensor:
    """
    Normalise gradients to unit normals.

    Gradients shorter than ``NORMAL_EPS`` are divided by ``|g| + NORMAL_EPS``
    instead and counted in ``ctx.degenerate_normals``.
    """
    norm = grad.norm(dim=-1, keepdim=True)
    degenerate = norm < NORMAL_EPS
    count = int(degenerate.sum())
    if count:
        if ctx is not None:
            ctx.degenerate_normals += count
        logger.debug(f"{count} degenerate normals (|grad| < {NORMAL_EPS})")
    return grad / torch.where(degenerate, norm + NORMAL_EPS, norm)


class SceneFields(nn.Module):
    """
    The complete optimisable scene state.

    Attributes:
        geometry (Mlp): x -> (s, z)
        color (Mlp): (PE(x), PE(v), n, z) -> RGB
        plane (Mlp): x -> plane logit
        log_beta (nn.Parameter): log of the Laplace density scale
    """

    def __init__(
        self,
        geometry: Mlp,
        color: Mlp,
        plane: Mlp,
        beta_init: float = 0.1,
        color_pos_freqs: int = 0,
        color_dir_freqs: int = 4,
    ):
        super().__init__()
        if beta_init <= 0:
            raise ConfigError(f"beta_init must be > 0, got {beta_init}")
        if geometry.spec.in_dim != 3 or plane.spec.in_dim != 3:
            raise ConfigError("geometry and plane networks take 3D points")
        self.geometry = geometry
        self.color = color
        self.plane = plane
        self.color_pos_freqs = color_pos_freqs
        self.color_dir_freqs = color_dir_freqs
        self.log_beta = nn.Parameter(torch.tensor(math.log(beta_init), dtype=DTYPE))

        expected = self.color_input_dim(self.feature_dim, color_pos_freqs, color_dir_freqs)
        if color.spec.in_dim != expected:
            raise ConfigError(
                f"color network in_dim {color.spec.in_dim} does not match the geometry "
                f"feature width {self.feature_dim} (expected {expected})"
            )

    @property
    def feature_dim(self) -> int:
        return self.geometry.spec.out_dim - 1

    @property
    def beta(self) -> torch.Tensor:
        return torch.exp(self.log_beta)

    @staticmethod
    def color_input_dim(feature_dim: int, pos_freqs: int, dir_freqs: int) -> int:
        return 3 * (1 + 2 * pos_freqs) + 3 * (1 + 2 * dir_freqs) + 3 + feature_dim

    def digests(self) -> Dict[str, str]:
        """Shape hashes of the three networks, stored in checkpoints."""
        return {
            'geometry': self.geometry.spec.digest(),
            'color': self.color.spec.digest(),
            'plane': self.plane.spec.digest(),
        }

    @classmethod
    def from_config(cls, cfg, seed: Optional[int] = None) -> SceneFields:
        """
        Build sphere-initialised fields from a ``TrainConfig``.

        The geometry network starts as a sphere of ``cfg.sphere_radius``, the plane
        head starts at logit 0 everywhere.
        """
        seed = cfg.seed if seed is None else seed
        geo_spec = MlpSpec(
            in_dim=3,
            hidden=(cfg.geo_width,) * cfg.geo_hidden_layers,
            out_dim=1 + cfg.feature_dim,
            activation='softplus',
            skips=tuple(cfg.geo_skips),
            weight_norm=cfg.weight_norm,
            softplus_beta=cfg.softplus_beta,
            num_freqs=cfg.geo_num_freqs,
        )
        color_spec = MlpSpec(
            in_dim=cls.color_input_dim(cfg.feature_dim, cfg.color_pos_freqs, cfg.color_dir_freqs),
            hidden=(cfg.color_width,) * cfg.color_hidden_layers,
            out_dim=3,
            activation='relu',
            output_activation='sigmoid',
            weight_norm=cfg.weight_norm,
        )
        plane_spec = MlpSpec(
            in_dim=3,
            hidden=(cfg.plane_width,) * cfg.plane_hidden_layers,
            out_dim=1,
            activation='relu',
            num_freqs=cfg.plane_num_freqs,
        )

        geometry = sphere_init(
            geo_spec,
            cfg.sphere_radius,
            seed,
            inside_out=cfg.sphere_inside_out,
            refine_steps=cfg.sphere_refine_steps,
            fit_extent=cfg.scene_radius,
        )
        color = Mlp(color_spec, torch.Generator().manual_seed(seed + 2))
        plane = Mlp(plane_spec, torch.Generator().manual_seed(seed + 3))
        plane.zero_output_layer()

        fields = cls(
            geometry,
            color,
            plane,
            beta_init=cfg.beta_init,
            color_pos_freqs=cfg.color_pos_freqs,
            color_dir_freqs=cfg.color_dir_freqs,
        )
        logger.info(
            f"Scene fields ready: geometry {geo_spec.param_count()} params, "
            f"color {color_spec.param_count()}, plane {plane_spec.param_count()}, "
            f"beta={cfg.beta_init}"
        )
        return fields

    def color_inputs(
        self, x: torch.Tensor, v: torch.Tensor, n: torch.Tensor, z: torch.Tensor
    ) -> torch.Tensor:
        return torch.cat([
            positional_encoding(x, self.color_pos_freqs),
            positional_encoding(v, self.color_dir_freqs),
            n,
            z,
        ], dim=-1)

    def sample(
        self,
        points: torch.Tensor,
        dirs: Optional[torch.Tensor] = None,
        ctx: Optional[DiffContext] = None,
        with_plane: bool = True,
    ) -> FieldSample:
        """
        Evaluate every field at ``points``.

        Args:
            points: (N, 3) positions
            dirs: (N, 3) unit viewing directions; color is skipped when None
            ctx: differentiation context
            with_plane: also evaluate the plane logit

        Returns:
            FieldSample with s, z, gradient and normal (plus c and p as requested)
        """
        ctx = ctx or DiffContext()
        points = torch.as_tensor(points, dtype=DTYPE)
        _check_points(points)
        outputs, grad = input_gradient(self.geometry, points, 0, ctx)
        s = outputs[..., 0]
        z = outputs[..., 1:]
        n = normalize_guarded(grad, ctx)

        c = None
        if dirs is not None:
            dirs = torch.as_tensor(dirs, dtype=DTYPE)
            c = forward(self.color, self.color_inputs(points, dirs, n, z), ctx)
        p = None
        if with_plane:
            p = forward(self.plane, points, ctx)[..., 0]
        return FieldSample(s=s, z=z, grad=grad, n=n, c=c, p=p)


def _check_points(points: torch.Tensor) -> None:
    if points.shape[-1] != 3:
        raise ConfigError(f"expected 3D points, got trailing dimension {points.shape[-1]}")


def eval_sdf(
    fields: SceneFields, x: torch.Tensor, ctx: Optional[DiffContext] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Signed distance and geometry features at ``x``."""
    x = torch.as_tensor(x, dtype=DTYPE)
    _check_points(x)
    out = forward(fields.geometry, x, ctx)
    return out[..., 0], out[..., 1:]


def eval_normal(fields: SceneFields, x: torch.Tensor, ctx: Optional[DiffContext] = None) -> torch.Tensor:
    """Unit normal ``grad s / |grad s|``, differentiable w.r.t. the geometry parameters."""
    ctx = ctx or DiffContext()
    x = torch.as_tensor(x, dtype=DTYPE)
    _check_points(x)
    _, grad = input_gradient(fields.geometry, x, 0, ctx)
    return normalize_guarded(grad, ctx)


def eval_color(
    fields: SceneFields, x: torch.Tensor, v: torch.Tensor, ctx: Optional[DiffContext] = None
) -> torch.Tensor:
    """RGB in [0, 1] seen from direction ``v``."""
    return fields.sample(x, v, ctx, with_plane=False).c


def eval_plane_logit(fields: SceneFields, x: torch.Tensor, ctx: Optional[DiffContext] = None) -> torch.Tensor:
    """Unbounded plane logit; the sigmoid is applied by the renderer."""
    x = torch.as_tensor(x, dtype=DTYPE)
    _check_points(x)
    return forward(fields.plane, x, ctx)[..., 0]
