"""
Unit tests for the coordinate MLPs and the differentiation helpers.
"""

import sys
import os
import math
import unittest

import numpy as np
import torch

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import ConfigError, ContractError, NumericalError
from models.mlp import (
    DTYPE,
    DiffContext,
    Mlp,
    MlpSpec,
    adam_step,
    backprop,
    forward,
    input_gradient,
    make_adam,
    param_slices,
    positional_encoding,
    sphere_init,
)


def naive_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Independent numpy re-evaluation of an Mlp without weight norm."""
    spec = net.spec
    enc = [x]
    for k in range(spec.num_freqs):
        enc += [np.sin((2.0 ** k) * np.pi * x), np.cos((2.0 ** k) * np.pi * x)]
    encoded = np.concatenate(enc, axis=-1)
    h = encoded
    for l, lin in enumerate(net.layers):
        if l in spec.skips:
            h = np.concatenate([h, encoded], axis=-1) / np.sqrt(2.0)
        h = h @ lin.weight.detach().numpy().T + lin.bias.detach().numpy()
        if l < len(net.layers) - 1:
            if spec.activation == 'softplus':
                b = spec.softplus_beta
                h = np.where(b * h > 20.0, h, np.log1p(np.exp(b * h)) / b)
            else:
                h = np.maximum(h, 0.0)
    if spec.output_activation == 'sigmoid':
        h = 1.0 / (1.0 + np.exp(-h))
    return h


def small_spec(**kwargs) -> MlpSpec:
    base = dict(in_dim=3, hidden=(16, 16), out_dim=2, activation='softplus', softplus_beta=10.0)
    base.update(kwargs)
    return MlpSpec(**base)


class TestPositionalEncoding(unittest.TestCase):
    """Test the sinusoidal input lifting."""

    def test_origin(self):
        out = positional_encoding(torch.zeros(1, 3, dtype=DTYPE), 2)[0].numpy()
        self.assertEqual(out.shape, (15,))
        np.testing.assert_array_equal(out[:3], 0.0)
        for k in range(2):
            np.testing.assert_array_equal(out[3 + 6 * k: 6 + 6 * k], 0.0)
            np.testing.assert_array_equal(out[6 + 6 * k: 9 + 6 * k], 1.0)

    def test_zero_frequencies_is_identity(self):
        x = torch.randn(5, 3, dtype=DTYPE)
        self.assertTrue(torch.equal(positional_encoding(x, 0), x))

    def test_matches_direct_trigonometry(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 3))
        out = positional_encoding(torch.as_tensor(x), 3).numpy()
        for k in range(3):
            np.testing.assert_allclose(out[:, 3 + 6 * k: 6 + 6 * k], np.sin(2.0 ** k * math.pi * x), atol=1e-14)
            np.testing.assert_allclose(out[:, 6 + 6 * k: 9 + 6 * k], np.cos(2.0 ** k * math.pi * x), atol=1e-14)

    def test_negative_frequencies_rejected(self):
        with self.assertRaises(ConfigError):
            positional_encoding(torch.zeros(1, 3, dtype=DTYPE), -1)


class TestMlpForward(unittest.TestCase):
    """Test network evaluation."""

    def test_zero_parameters_give_zero_output(self):
        net = Mlp(small_spec(activation='relu'))
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        out = forward(net, torch.randn(7, 3, dtype=DTYPE))
        self.assertTrue(torch.equal(out, torch.zeros(7, 2, dtype=DTYPE)))

    def test_single_hidden_layer_by_hand(self):
        net = Mlp(MlpSpec(in_dim=2, hidden=(2,), out_dim=1, activation='relu'))
        with torch.no_grad():
            net.layers[0].weight.copy_(torch.tensor([[1.0, -1.0], [2.0, 0.5]]))
            net.layers[0].bias.copy_(torch.tensor([0.0, -1.0]))
            net.layers[1].weight.copy_(torch.tensor([[3.0, 1.0]]))
            net.layers[1].bias.copy_(torch.tensor([0.25]))
        out = forward(net, torch.tensor([[1.0, 2.0]], dtype=DTYPE))
        # hidden = relu([-1, 2]) = [0, 2]; output = 3*0 + 1*2 + 0.25
        self.assertAlmostEqual(float(out[0, 0]), 2.25)

    def test_matches_naive_evaluator_with_skip_and_encoding(self):
        spec = small_spec(hidden=(32, 32, 32), skips=(2,), num_freqs=2, out_dim=4)
        net = Mlp(spec, torch.Generator().manual_seed(3))
        x = np.random.default_rng(1).normal(size=(10, 3))
        out = forward(net, torch.as_tensor(x)).detach().numpy()
        np.testing.assert_allclose(out, naive_forward(net, x), atol=1e-12)

    def test_sigmoid_output_in_unit_interval(self):
        net = Mlp(small_spec(activation='relu', output_activation='sigmoid', out_dim=3))
        out = forward(net, 10.0 * torch.randn(100, 3, dtype=DTYPE))
        self.assertTrue(bool(((out >= 0) & (out <= 1)).all()))

    def test_wrong_input_width_raises(self):
        net = Mlp(small_spec())
        with self.assertRaises(ConfigError):
            forward(net, torch.zeros(2, 4, dtype=DTYPE))

    def test_skip_must_fit_encoded_input(self):
        with self.assertRaises(ConfigError):
            MlpSpec(in_dim=3, hidden=(8, 8), out_dim=1, skips=(1,), num_freqs=2)

    def test_same_seed_same_parameters(self):
        a = Mlp(small_spec(), torch.Generator().manual_seed(5))
        b = Mlp(small_spec(), torch.Generator().manual_seed(5))
        for pa, pb in zip(a.parameters(), b.parameters()):
            self.assertTrue(torch.equal(pa, pb))

    def test_param_count_matches_module(self):
        spec = small_spec(hidden=(32, 32, 32), skips=(2,), num_freqs=1)
        net = Mlp(spec)
        self.assertEqual(spec.param_count(), sum(p.numel() for p in net.parameters()))


class TestInputGradient(unittest.TestCase):
    """Test spatial derivatives."""

    def test_linear_layer_gradient_is_weight(self):
        lin = torch.nn.Linear(3, 1, dtype=DTYPE)
        _, grad = input_gradient(lin, torch.randn(4, 3, dtype=DTYPE))
        for row in grad:
            self.assertTrue(torch.allclose(row, lin.weight[0], atol=0, rtol=0))

    def test_matches_central_differences(self):
        net = Mlp(small_spec(num_freqs=1), torch.Generator().manual_seed(0))
        x = torch.randn(5, 3, dtype=DTYPE)
        _, grad = input_gradient(net, x, output_index=1, ctx=DiffContext.inference())
        h = 1e-5
        fd = torch.zeros_like(x)
        with torch.no_grad():
            for d in range(3):
                e = torch.zeros(3, dtype=DTYPE)
                e[d] = h
                fd[:, d] = (net(x + e)[:, 1] - net(x - e)[:, 1]) / (2 * h)
        rel = (grad - fd).norm(dim=-1) / fd.norm(dim=-1)
        self.assertLess(float(rel.max()), 1e-4)

    def test_bad_output_index(self):
        net = Mlp(small_spec())
        with self.assertRaises(ContractError):
            input_gradient(net, torch.zeros(1, 3, dtype=DTYPE), output_index=2)

    def test_inference_context_detaches(self):
        net = Mlp(small_spec())
        out, grad = input_gradient(net, torch.zeros(2, 3, dtype=DTYPE), ctx=DiffContext.inference())
        self.assertFalse(out.requires_grad)
        self.assertFalse(grad.requires_grad)


class TestBackprop(unittest.TestCase):
    """Test parameter gradients, including nested differentiation."""

    def test_sum_of_parameters_gives_ones(self):
        net = Mlp(small_spec())
        loss = sum(p.sum() for p in net.parameters())
        g = backprop(loss, net.parameters())
        self.assertTrue(torch.equal(g, torch.ones_like(g)))

    def test_constant_loss_gives_zeros(self):
        net = Mlp(small_spec())
        g = backprop(torch.tensor(0.0, dtype=DTYPE), net.parameters())
        self.assertEqual(g.numel(), small_spec().param_count())
        self.assertTrue(torch.equal(g, torch.zeros_like(g)))

    def test_non_scalar_loss_raises(self):
        net = Mlp(small_spec())
        with self.assertRaises(ContractError):
            backprop(net(torch.zeros(2, 3, dtype=DTYPE)), net.parameters())

    def test_loss_with_input_gradient_matches_finite_differences(self):
        """Gradient of sum (|grad f| - 1)^2 w.r.t. 100 sampled parameters."""
        net = Mlp(small_spec(hidden=(16, 16, 16), skips=(2,), num_freqs=1), torch.Generator().manual_seed(1))
        x = torch.randn(8, 3, generator=torch.Generator().manual_seed(2), dtype=DTYPE)

        def loss_fn():
            _, grad = input_gradient(net, x, 0, DiffContext())
            return ((grad.norm(dim=-1) - 1.0) ** 2).sum() + net(x)[:, 1].sum()

        params = list(net.parameters())
        analytic = backprop(loss_fn(), params)
        flat = torch.nn.utils.parameters_to_vector(params).detach().clone()
        chosen = np.random.default_rng(3).choice(flat.numel(), size=100, replace=False)
        h = 1e-5
        fd = torch.zeros(len(chosen), dtype=DTYPE)
        with torch.no_grad():
            for k, idx in enumerate(chosen):
                for sign in (1.0, -1.0):
                    shifted = flat.clone()
                    shifted[idx] += sign * h
                    torch.nn.utils.vector_to_parameters(shifted, params)
                    with torch.enable_grad():
                        value = float(loss_fn())
                    fd[k] += sign * value / (2 * h)
            torch.nn.utils.vector_to_parameters(flat, params)
        rel = float((analytic[chosen] - fd).norm() / fd.norm())
        self.assertLess(rel, 1e-3)

    def test_param_slices_cover_vector(self):
        net = Mlp(small_spec())
        slices = param_slices(net)
        self.assertEqual(max(s.stop for s in slices.values()), small_spec().param_count())


class TestSphereInit(unittest.TestCase):
    """Test geometric initialisation of the geometry network."""

    def setUp(self):
        self.spec = MlpSpec(
            in_dim=3, hidden=(64, 64, 64, 64), out_dim=9, skips=(2,), softplus_beta=100.0, num_freqs=6
        )

    def _sdf(self, net, points):
        with torch.no_grad():
            return net(torch.as_tensor(points, dtype=DTYPE))[:, 0].numpy()

    def test_origin_and_surface_values(self):
        net = sphere_init(self.spec, 0.5, seed=0)
        self.assertLess(abs(self._sdf(net, np.zeros((1, 3)))[0] + 0.5), 0.15)
        dirs = np.random.default_rng(0).normal(size=(200, 3))
        on_sphere = 0.5 * dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        self.assertLess(np.abs(self._sdf(net, on_sphere)).max(), 0.15)

    def test_inside_out_flips_sign(self):
        net = sphere_init(self.spec, 0.5, seed=0, inside_out=True)
        self.assertLess(abs(self._sdf(net, np.zeros((1, 3)))[0] - 0.5), 0.15)

    def test_gradient_is_radial(self):
        net = sphere_init(self.spec, 0.5, seed=1)
        dirs = np.random.default_rng(1).normal(size=(100, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        x = torch.as_tensor(0.6 * dirs)
        _, grad = input_gradient(net, x, 0, DiffContext.inference())
        cosine = (grad.numpy() * dirs).sum(-1) / np.linalg.norm(grad.numpy(), axis=-1)
        self.assertGreater(float(cosine.mean()), 0.9)

    def test_seeds_differ_and_repeat(self):
        a = sphere_init(self.spec, 0.5, seed=0, refine_steps=20)
        b = sphere_init(self.spec, 0.5, seed=1, refine_steps=20)
        c = sphere_init(self.spec, 0.5, seed=0, refine_steps=20)
        pa, pb, pc = (torch.nn.utils.parameters_to_vector(n.parameters()) for n in (a, b, c))
        self.assertFalse(torch.equal(pa, pb))
        self.assertTrue(torch.equal(pa, pc))

    def test_requires_3d_input(self):
        with self.assertRaises(ConfigError):
            sphere_init(MlpSpec(in_dim=2, hidden=(8,), out_dim=1), 0.5, seed=0)


class TestAdam(unittest.TestCase):
    """Test the optimizer step."""

    def test_first_step_magnitude(self):
        p = torch.nn.Parameter(torch.zeros(1, dtype=DTYPE))
        opt = make_adam([p], lr=1e-2)
        p.grad = torch.ones(1, dtype=DTYPE)
        self.assertEqual(adam_step(opt), 1)
        self.assertAlmostEqual(float(p), -9.99999e-3, delta=1e-9)

    def test_zero_gradient_keeps_parameters_and_decays_moments(self):
        p = torch.nn.Parameter(torch.full((2,), 3.0, dtype=DTYPE))
        opt = make_adam([p], lr=1e-2)
        p.grad = torch.zeros(2, dtype=DTYPE)
        adam_step(opt)
        self.assertTrue(torch.equal(p.detach(), torch.full((2,), 3.0, dtype=DTYPE)))

        p.grad = torch.ones(2, dtype=DTYPE)
        adam_step(opt)
        m1 = opt.state[p]['exp_avg'].clone()
        p.grad = torch.zeros(2, dtype=DTYPE)
        adam_step(opt)
        self.assertTrue(torch.allclose(opt.state[p]['exp_avg'], 0.9 * m1))

    def test_non_finite_gradient_is_rejected(self):
        p = torch.nn.Parameter(torch.ones(1, dtype=DTYPE))
        opt = make_adam([p], lr=1e-2)
        p.grad = torch.tensor([float('nan')], dtype=DTYPE)
        with self.assertRaises(NumericalError) as cm:
            adam_step(opt, {id(p): 'weight'})
        self.assertEqual(cm.exception.term, 'weight')
        self.assertEqual(float(p), 1.0)

    def test_identical_runs_are_bit_identical(self):
        def run():
            torch.manual_seed(0)
            net = Mlp(small_spec(), torch.Generator().manual_seed(0))
            opt = make_adam(net.parameters(), 1e-3)
            x = torch.randn(16, 3, generator=torch.Generator().manual_seed(1), dtype=DTYPE)
            for _ in range(5):
                opt.zero_grad()
                net(x).pow(2).sum().backward()
                adam_step(opt)
            return torch.nn.utils.parameters_to_vector(net.parameters()).detach()

        self.assertTrue(torch.equal(run(), run()))


def run_tests():
    """Run all tests."""
    unittest.main(argv=[''], verbosity=2, exit=False)


if __name__ == '__main__':
    run_tests()
