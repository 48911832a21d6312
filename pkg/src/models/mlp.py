"""
Coordinate MLPs and the differentiation helpers the losses are built on.

Parameter gradients come from torch autograd. Spatial derivatives of a network
output are taken with ``torch.autograd.grad(create_graph=True)`` so that any loss
containing them (normals, Eikonal term) stays differentiable w.r.t. the
parameters. Everything runs in float64.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import torch
from torch import nn

from errors import ConfigError, ContractError, NumericalError
from logger import get_logger


logger = get_logger(__name__)

DTYPE = torch.float64
REFINE_EIKONAL_WEIGHT = 1.0


def positional_encoding(x: torch.Tensor, num_freqs: int) -> torch.Tensor:
    """
    Lift coordinates with sinusoids of octave-spaced frequencies.

    Output layout along the last axis is
    ``[x, sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x), ..., cos(2^(L-1) pi x)]``
    where every sin/cos block spans all input components, giving
    ``dim * (1 + 2L)`` features.

    Args:
        x: (..., dim) coordinates
        num_freqs: number of octaves L (0 returns ``x`` unchanged)

    Returns:
        Encoded tensor of shape (..., dim * (1 + 2L))
    """
    if num_freqs < 0:
        raise ConfigError(f"num_freqs must be >= 0, got {num_freqs}")
    x = torch.as_tensor(x, dtype=DTYPE)
    if num_freqs == 0:
        return x
    parts = [x]
    for k in range(num_freqs):
        scaled = (2.0 ** k) * math.pi * x
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    return torch.cat(parts, dim=-1)


@dataclass(frozen=True)
class MlpSpec:
    """
    Shape and activation description of a coordinate MLP.

    Attributes:
        in_dim (int): raw input width (before positional encoding)
        hidden (tuple): hidden layer widths
        out_dim (int): output width
        activation (str): 'softplus' or 'relu' for hidden layers
        output_activation (str): 'none' or 'sigmoid'
        skips (tuple): linear-layer indices whose input is concatenated with the
            encoded network input (scaled by 1/sqrt(2))
        weight_norm (bool): reparametrise every linear layer with weight norm
        softplus_beta (float): sharpness of the softplus activation
        num_freqs (int): positional encoding octaves applied to the input
    """
    in_dim: int
    hidden: Tuple[int, ...]
    out_dim: int
    activation: str = 'softplus'
    output_activation: str = 'none'
    skips: Tuple[int, ...] = ()
    weight_norm: bool = False
    softplus_beta: float = 100.0
    num_freqs: int = 0

    def __post_init__(self):
        if len(self.hidden) < 1:
            raise ConfigError("an MLP needs at least one hidden layer")
        if self.in_dim <= 0 or self.out_dim <= 0 or any(w <= 0 for w in self.hidden):
            raise ConfigError(f"layer widths must be positive: {self}")
        if self.activation not in ('softplus', 'relu'):
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.output_activation not in ('none', 'sigmoid'):
            raise ConfigError(f"unsupported output activation {self.output_activation!r}")
        for s in self.skips:
            if not 0 < s <= len(self.hidden):
                raise ConfigError(f"skip index {s} outside 1..{len(self.hidden)}")
            if self.hidden[s - 1] <= self.encoded_dim:
                raise ConfigError(
                    f"hidden width {self.hidden[s - 1]} before skip {s} must exceed "
                    f"the encoded input width {self.encoded_dim}"
                )

    @property
    def encoded_dim(self) -> int:
        return self.in_dim * (1 + 2 * self.num_freqs)

    def layer_shapes(self) -> Tuple[Tuple[int, int], ...]:
        """(in_features, out_features) of every linear layer."""
        dims = [self.encoded_dim, *self.hidden, self.out_dim]
        shapes = []
        for l in range(len(dims) - 1):
            fan_in = dims[l]
            fan_out = dims[l + 1]
            if (l + 1) in self.skips:
                fan_out = dims[l + 1] - self.encoded_dim
            shapes.append((fan_in, fan_out))
        return tuple(shapes)

    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    def digest(self) -> str:
        """Stable short hash used to check checkpoints against the network shape."""
        return hashlib.sha1(repr(self).encode('utf-8')).hexdigest()[:16]


class Mlp(nn.Module):
    """
    Fully connected network described by an ``MlpSpec``.

    Layers are initialised from an explicit ``torch.Generator`` so that the same
    seed always yields bit-identical parameters.
    """

    def __init__(self, spec: MlpSpec, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleList(
            nn.Linear(fan_in, fan_out, dtype=DTYPE) for fan_in, fan_out in spec.layer_shapes()
        )
        self.reset_parameters(generator)
        self._apply_weight_norm()

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        """Uniform fan-in initialisation, the torch.nn.Linear default, but seeded."""
        with torch.no_grad():
            for lin in self._linears():
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.copy_(_uniform(lin.weight.shape, bound, generator))
                lin.bias.copy_(_uniform(lin.bias.shape, bound, generator))

    def zero_output_layer(self) -> None:
        """Make the network output exactly zero (used for the plane head)."""
        with torch.no_grad():
            last = self._linears()[-1]
            last.weight.zero_()
            last.bias.zero_()

    def _linears(self) -> Sequence[nn.Linear]:
        return list(self.layers)

    def _apply_weight_norm(self) -> None:
        if not self.spec.weight_norm:
            return
        for i in range(len(self.layers)):
            self.layers[i] = nn.utils.parametrizations.weight_norm(self.layers[i])

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        encoded = positional_encoding(inputs, spec.num_freqs)
        h = encoded
        last = len(self.layers) - 1
        for l, lin in enumerate(self.layers):
            if l in spec.skips:
                h = torch.cat([h, encoded], dim=-1) / math.sqrt(2.0)
            h = lin(h)
            if l < last:
                if spec.activation == 'softplus':
                    h = nn.functional.softplus(h, beta=spec.softplus_beta)
                else:
                    h = torch.relu(h)
        if spec.output_activation == 'sigmoid':
            h = torch.sigmoid(h)
        return h


@dataclass
class DiffContext:
    """
    Per-evaluation differentiation settings and diagnostics.

    Attributes:
        create_graph (bool): keep the autograd graph of every result, including
            spatial gradients, so losses built on them can be back-propagated
        degenerate_normals (int): number of normals whose gradient norm fell
            below the normalisation guard
    """
    create_graph: bool = True
    degenerate_normals: int = 0

    @classmethod
    def inference(cls) -> DiffContext:
        return cls(create_graph=False)


def forward(net: nn.Module, inputs: torch.Tensor, ctx: Optional[DiffContext] = None) -> torch.Tensor:
    """
    Evaluate ``net``; the autograd trace is kept only when ``ctx.create_graph``.

    Raises:
        ConfigError: If the input width does not match the network
    """
    ctx = ctx or DiffContext()
    spec = getattr(net, 'spec', None)
    if spec is not None and inputs.shape[-1] != spec.in_dim:
        raise ConfigError(f"input width {inputs.shape[-1]} does not match network in_dim {spec.in_dim}")
    if ctx.create_graph:
        return net(inputs)
    with torch.no_grad():
        return net(inputs)


def input_gradient(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    output_index: int = 0,
    ctx: Optional[DiffContext] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Outputs of ``fn`` and the derivative of one output w.r.t. the input coordinates.

    With ``ctx.create_graph`` the derivative is itself a differentiable function of
    the parameters inside ``fn``; otherwise both results are detached.

    Args:
        fn: maps (N, d) inputs to (N, k) outputs
        x: (N, d) evaluation points
        output_index: which output column to differentiate
        ctx: differentiation context

    Returns:
        Tuple of (outputs (N, k), gradient (N, d))
    """
    ctx = ctx or DiffContext()
    x = torch.as_tensor(x, dtype=DTYPE).detach().requires_grad_(True)
    with torch.enable_grad():
        outputs = fn(x)
        if not 0 <= output_index < outputs.shape[-1]:
            raise ContractError(f"output_index {output_index} outside 0..{outputs.shape[-1] - 1}")
        selected = outputs[..., output_index]
        (grad,) = torch.autograd.grad(
            selected,
            x,
            grad_outputs=torch.ones_like(selected),
            create_graph=ctx.create_graph,
            retain_graph=True,
        )
    if not ctx.create_graph:
        return outputs.detach(), grad.detach()
    return outputs, grad


def backprop(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> torch.Tensor:
    """
    Gradient of a scalar loss w.r.t. ``params`` as one flat vector.

    Parameters themselves are untouched. Parameters the loss does not depend on,
    or a constant loss, give zeros.

    Raises:
        ContractError: If ``loss`` is not a scalar tensor
    """
    params = list(params)
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise ContractError(f"loss must be a scalar tensor, got shape {getattr(loss, 'shape', None)}")
    if not loss.requires_grad:
        return torch.zeros(sum(p.numel() for p in params), dtype=DTYPE)
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    return torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1)
        for g, p in zip(grads, params)
    ])


def param_slices(module: nn.Module) -> Dict[str, slice]:
    """Name -> slice index of every parameter inside the flat parameter vector."""
    slices: Dict[str, slice] = {}
    offset = 0
    for name, p in module.named_parameters():
        slices[name] = slice(offset, offset + p.numel())
        offset += p.numel()
    return slices


def sphere_init(
    spec: MlpSpec,
    radius: float,
    seed: int,
    inside_out: bool = False,
    refine_steps: int = 200,
    fit_extent: float = 1.0,
) -> Mlp:
    """
    Geometric initialisation making output 0 approximate a sphere SDF.

    The first output starts close to ``|x| - radius`` (``radius - |x|`` with
    ``inside_out``): hidden layers get zero-mean weights with std sqrt(2/fan_out),
    encoded (sinusoid) input columns start at zero, and the last layer has mean
    sqrt(pi/fan_in) with bias ``-radius``. ``refine_steps`` Adam iterations then fit
    output 0 to the radial target, with a penalty on ``(|grad| - 1)^2``, on points
    uniform in ``[-e, e]^3`` with ``e = max(fit_extent, 1.5 * radius)``.

    Args:
        spec: geometry network spec (scalar SDF as first output, 3D input)
        radius: sphere radius
        seed: RNG seed for weights and refinement samples
        inside_out: flip the sign so the sphere interior is positive
        refine_steps: number of refinement steps (0 disables)
        fit_extent: half-size of the refinement cube

    Returns:
        Initialised network
    """
    if spec.in_dim != 3:
        raise ConfigError(f"sphere_init expects a 3D input, got in_dim={spec.in_dim}")
    generator = torch.Generator().manual_seed(seed)
    raw_spec = dataclasses.replace(spec, weight_norm=False)
    net = Mlp(raw_spec, generator)
    sign = -1.0 if inside_out else 1.0
    encoded_dim = spec.encoded_dim
    last = len(net.layers) - 1

    with torch.no_grad():
        for l, lin in enumerate(net.layers):
            fan_in, fan_out = lin.in_features, lin.out_features
            if l == last:
                mean = sign * math.sqrt(math.pi) / math.sqrt(fan_in)
                lin.weight.copy_(_normal(lin.weight.shape, mean, 1e-4, generator))
                lin.bias.fill_(-sign * radius)
                continue
            std = math.sqrt(2.0) / math.sqrt(fan_out)
            lin.weight.copy_(_normal(lin.weight.shape, 0.0, std, generator))
            lin.bias.zero_()
            if spec.num_freqs > 0 and l == 0:
                lin.weight[:, 3:] = 0.0
            elif spec.num_freqs > 0 and l in spec.skips:
                lin.weight[:, -(encoded_dim - 3):] = 0.0

    if refine_steps > 0:
        _refine_sphere(net, radius, sign, seed, refine_steps, max(fit_extent, 1.5 * radius))

    if spec.weight_norm:
        net.spec = spec
        for i in range(len(net.layers)):
            net.layers[i] = nn.utils.parametrizations.weight_norm(net.layers[i])
    logger.debug(f"sphere_init radius={radius} inside_out={inside_out} seed={seed} spec={spec}")
    return net


def _refine_sphere(net: Mlp, radius: float, sign: float, seed: int, steps: int, extent: float) -> None:
    """Fit output 0 to the radial target with a unit-gradient penalty on the same points."""
    generator = torch.Generator().manual_seed(seed + 1)
    optimizer = torch.optim.Adam(net.parameters(), lr=1e-3, foreach=False)
    ctx = DiffContext(create_graph=True)
    for _ in range(steps):
        points = (torch.rand((1024, 3), generator=generator, dtype=DTYPE) * 2.0 - 1.0) * extent
        target = sign * (points.norm(dim=-1) - radius)
        optimizer.zero_grad(set_to_none=True)
        outputs, grad = input_gradient(net, points, 0, ctx)
        fit = ((outputs[:, 0] - target) ** 2).mean()
        loss = fit + REFINE_EIKONAL_WEIGHT * ((grad.norm(dim=-1) - 1.0) ** 2).mean()
        loss.backward()
        optimizer.step()
    for p in net.parameters():
        p.grad = None


def make_adam(params: Iterable[torch.Tensor], lr: float) -> torch.optim.Adam:
    """Adam with beta1=0.9, beta2=0.999, eps=1e-8; the optimizer state is the Adam moment store."""
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8, foreach=False)


def adam_step(optimizer: torch.optim.Optimizer, names: Optional[Dict[int, str]] = None) -> int:
    """
    Apply one bias-corrected Adam update after checking every gradient is finite.

    Args:
        optimizer: optimizer whose parameters carry ``.grad``
        names: optional ``id(param) -> name`` map for diagnostics

    Returns:
        Step count after the update

    Raises:
        NumericalError: If any gradient is non-finite; parameters and moments are left untouched
    """
    names = names or {}
    for group in optimizer.param_groups:
        for i, p in enumerate(group['params']):
            if p.grad is not None and not torch.isfinite(p.grad).all():
                name = names.get(id(p), f"param[{i}]")
                logger.error(f"Rejected Adam step: non-finite gradient in {name}")
                raise NumericalError(f"non-finite gradient in {name}", term=name)
    optimizer.step()
    steps = [
        int(state['step']) for state in optimizer.state.values() if 'step' in state
    ]
    return max(steps) if steps else 0


def _uniform(shape, bound: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    return (torch.rand(shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound


def _normal(shape, mean: float, std: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    return torch.randn(shape, generator=generator, dtype=DTYPE) * std + mean
