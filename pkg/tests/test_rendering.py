"""
Unit tests for density, ray sampling and compositing.
"""

import sys
import os
import math
import unittest

import numpy as np
import torch
from scipy import stats

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))
sys.path.insert(0, os.path.dirname(__file__))

from errors import DomainError
from helpers import tiny_fields
from models.mlp import DTYPE, DiffContext
from services.rendering_service import (
    RenderingService,
    composite,
    compute_weights,
    density_from_sdf,
    ray_far_bounds,
    render_ray,
    render_rays,
    sample_deltas,
    sample_ray,
    stratified_samples,
)
from models.fields import FieldSample
from services.synth_service import analytic_normals, analytic_sdf, default_scene
from utils.geometry import Bounds, CameraModel, Ray, look_at_pose


class MidpointRng:
    """rng stub returning 0.5 for every draw."""

    def random(self, shape):
        return np.full(shape, 0.5)


class AnalyticFields:
    """Exact signed distance and normals of a scene with a flat grey albedo."""

    def __init__(self, scene, beta):
        self.scene = scene
        self.beta = torch.tensor(beta, dtype=DTYPE)

    def sample(self, points, dirs=None, ctx=None, with_plane=True):
        x = points.detach().numpy()
        n = torch.as_tensor(analytic_normals(self.scene, x))
        return FieldSample(
            s=torch.as_tensor(analytic_sdf(self.scene, x)),
            z=torch.zeros(len(x), 0, dtype=DTYPE),
            grad=n,
            n=n,
            c=torch.full((len(x), 3), 0.5, dtype=DTYPE),
            p=torch.zeros(len(x), dtype=DTYPE),
        )


class TestDensity(unittest.TestCase):
    """Test the Laplace-CDF density."""

    def test_surface_value(self):
        self.assertAlmostEqual(density_from_sdf(0.0, 0.1), 5.0, places=12)

    def test_outside_vanishes(self):
        self.assertAlmostEqual(density_from_sdf(1.0, 0.1), 5.0 * math.exp(-10.0), places=15)
        self.assertAlmostEqual(density_from_sdf(2.0, 0.1), 0.5 * math.exp(-20.0) / 0.1, places=18)

    def test_inside_saturates(self):
        self.assertAlmostEqual(density_from_sdf(-1.0, 0.1), 10.0 * (1.0 - 0.5 * math.exp(-10.0)), places=12)

    def test_continuity_at_surface(self):
        beta = 0.05
        left = density_from_sdf(-1e-13, beta)
        right = density_from_sdf(1e-13, beta)
        self.assertLess(abs(left - 1.0 / (2 * beta)), 1e-9)
        self.assertLess(abs(right - 1.0 / (2 * beta)), 1e-9)

    def test_monotone_decreasing(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b = np.sort(rng.normal(scale=0.5, size=2))
            self.assertGreaterEqual(density_from_sdf(a, 0.1), density_from_sdf(b, 0.1))

    def test_scale_family(self):
        """sigma(s; beta) = g(s / beta) / beta for a fixed shape g."""
        s = np.linspace(-1.0, 1.0, 21)
        g1 = density_from_sdf(s, 0.1) * 0.1
        g2 = density_from_sdf(s * 2.0, 0.2) * 0.2
        np.testing.assert_allclose(g1, g2, atol=1e-14)

    def test_literal_orientation_mirrors(self):
        self.assertAlmostEqual(density_from_sdf(1.0, 0.1, literal=True), density_from_sdf(-1.0, 0.1))

    def test_nonpositive_beta_raises(self):
        with self.assertRaises(DomainError):
            density_from_sdf(0.0, 0.0)
        with self.assertRaises(DomainError):
            density_from_sdf(0.0, -1.0)

    def test_gradient_at_surface(self):
        beta = 0.1
        s = torch.tensor(0.0, dtype=DTYPE, requires_grad=True)
        density_from_sdf(s, beta).backward()
        self.assertAlmostEqual(float(s.grad), -1.0 / (2.0 * beta ** 2), places=10)
        s = torch.tensor(0.0, dtype=DTYPE, requires_grad=True)
        density_from_sdf(s, beta, literal=True).backward()
        self.assertAlmostEqual(float(s.grad), 1.0 / (2.0 * beta ** 2), places=10)

    def test_gradient_matches_finite_differences(self):
        beta, h = 0.1, 1e-6
        for value in (-0.3, -1e-3, 1e-3, 0.3):
            s = torch.tensor(value, dtype=DTYPE, requires_grad=True)
            density_from_sdf(s, beta).backward()
            numeric = (density_from_sdf(value + h, beta) - density_from_sdf(value - h, beta)) / (2 * h)
            self.assertAlmostEqual(float(s.grad), numeric, delta=1e-4 * max(1.0, abs(numeric)))

    def test_tensor_in_tensor_out_with_gradient(self):
        s = torch.tensor([0.1, -0.1], dtype=DTYPE)
        log_beta = torch.tensor(math.log(0.1), dtype=DTYPE, requires_grad=True)
        sigma = density_from_sdf(s, torch.exp(log_beta))
        sigma.sum().backward()
        self.assertTrue(torch.isfinite(log_beta.grad))


class TestSampling(unittest.TestCase):
    """Test stratified ray sampling."""

    def test_midpoints(self):
        ray = Ray((0.0, 0.0, 0.0), (0.0, 0.0, 1.0))
        t = sample_ray(ray, 0.0, 1.0, 4, MidpointRng())
        np.testing.assert_allclose(t, [0.125, 0.375, 0.625, 0.875])

    def test_within_bounds_and_increasing(self):
        t = stratified_samples(np.full(100, 0.5), np.full(100, 2.5), 32, np.random.default_rng(0))
        self.assertTrue(np.all(t >= 0.5) and np.all(t <= 2.5))
        self.assertTrue(np.all(np.diff(t, axis=-1) >= 0))

    def test_strata_are_uniform(self):
        t = stratified_samples(np.zeros(100000), np.ones(100000), 4, np.random.default_rng(1))
        for k in range(4):
            u = (t[:, k] - k / 4.0) * 4.0
            self.assertGreater(stats.kstest(u, 'uniform').pvalue, 1e-3)

    def test_invalid_bounds(self):
        with self.assertRaises(DomainError):
            stratified_samples(1.0, 1.0, 4)
        with self.assertRaises(DomainError):
            stratified_samples(-0.1, 1.0, 4)
        with self.assertRaises(DomainError):
            stratified_samples(0.0, 1.0, 1)
        with self.assertRaises(DomainError):
            stratified_samples(0.0, float('inf'), 4)

    def test_terminal_delta(self):
        t = torch.tensor([[0.25, 0.5, 0.75]], dtype=DTYPE)
        np.testing.assert_allclose(sample_deltas(t, 1.0).numpy(), [[0.25, 0.25, 0.25]])
        np.testing.assert_allclose(sample_deltas(t, 0.75).numpy()[0, -1], 1e-4)

    def test_far_bounds_box_and_fixed(self):
        bounds = Bounds(-np.ones(3), np.ones(3))
        far = ray_far_bounds(np.zeros((2, 3)), np.eye(3)[:2], bounds, 0.02)
        np.testing.assert_allclose(far, [1.0, 1.0])
        np.testing.assert_allclose(ray_far_bounds(np.zeros((2, 3)), np.eye(3)[:2], bounds, 0.0, 'fixed', 3.0), 3.0)
        with self.assertRaises(DomainError):
            ray_far_bounds(np.zeros((1, 3)), np.eye(3)[:1], None, 1.0, 'fixed', 0.5)

    def test_far_bounds_margin_pads_box(self):
        bounds = Bounds(-np.ones(3), np.ones(3))
        far = ray_far_bounds(np.zeros((3, 3)), -np.eye(3), bounds, 0.02, margin=1.0)
        np.testing.assert_allclose(far, [2.0, 2.0, 2.0])
        origin = np.array([[0.5, 0.0, 0.0]])
        np.testing.assert_allclose(ray_far_bounds(origin, np.eye(3)[:1], bounds, 0.02, margin=0.5), [1.0])


class TestWeights(unittest.TestCase):
    """Test the compositing quadrature."""

    def test_single_sample_half_opacity(self):
        T, w = compute_weights(torch.tensor([math.log(2.0)], dtype=DTYPE), torch.ones(1, dtype=DTYPE))
        self.assertEqual(float(T[0]), 1.0)
        self.assertAlmostEqual(float(w[0]), 0.5, places=15)

    def test_vacuum(self):
        T, w = compute_weights(torch.zeros(8, dtype=DTYPE), torch.full((8,), 0.1, dtype=DTYPE))
        self.assertTrue(torch.equal(T, torch.ones(8, dtype=DTYPE)))
        self.assertTrue(torch.equal(w, torch.zeros(8, dtype=DTYPE)))

    def test_weight_sum_matches_total_absorption(self):
        rng = np.random.default_rng(2)
        sigma = torch.as_tensor(rng.uniform(0, 5, size=(10, 32)))
        delta = torch.as_tensor(rng.uniform(0.01, 0.1, size=(10, 32)))
        _, w = compute_weights(sigma, delta)
        expected = 1.0 - torch.exp(-(sigma * delta).sum(-1))
        self.assertLess(float((w.sum(-1) - expected).abs().max()), 1e-12)

    def test_matches_fine_quadrature(self):
        """Piecewise-constant density integrated on a 1000x finer grid."""
        rng = np.random.default_rng(3)
        sigma = rng.uniform(0, 4, size=16)
        delta = rng.uniform(0.05, 0.2, size=16)
        _, w = compute_weights(torch.as_tensor(sigma), torch.as_tensor(delta))
        fine = 1000
        sig_f = np.repeat(sigma, fine)
        dt_f = np.repeat(delta / fine, fine)
        T_f = np.exp(-(np.cumsum(sig_f * dt_f) - sig_f * dt_f))
        w_f = (T_f * (1.0 - np.exp(-sig_f * dt_f))).reshape(16, fine).sum(-1)
        np.testing.assert_allclose(w.numpy(), w_f, atol=1e-10)

    def test_shape_mismatch(self):
        with self.assertRaises(DomainError):
            compute_weights(torch.zeros(3, dtype=DTYPE), torch.zeros(4, dtype=DTYPE))


class TestComposite(unittest.TestCase):
    """Test accumulation with stub fields."""

    def _constant(self, sigma_value):
        t = torch.tensor([[2.0]], dtype=DTYPE)
        delta = torch.tensor([[1.0]], dtype=DTYPE)
        sigma = torch.tensor([[sigma_value]], dtype=DTYPE)
        colors = torch.tensor([[[1.0, 0.0, 0.0]]], dtype=DTYPE)
        normals = torch.tensor([[[0.0, 0.0, 1.0]]], dtype=DTYPE)
        logits = torch.zeros(1, 1, dtype=DTYPE)
        return composite(t, delta, sigma, colors, normals, logits, ctx=DiffContext())

    def test_opaque_sample(self):
        out = self._constant(50.0)
        w = float(out.opacity[0])
        self.assertGreater(w, 0.999)
        np.testing.assert_allclose(out.color[0].numpy(), [w, 0.0, 0.0])
        self.assertAlmostEqual(float(out.depth[0]), 2.0 * w)
        np.testing.assert_allclose(out.normal[0].numpy(), [0.0, 0.0, 1.0])
        self.assertAlmostEqual(float(out.plane_prob[0]), 0.5 * w)

    def test_empty_space_renders_black_at_zero_depth(self):
        out = self._constant(0.0)
        self.assertEqual(float(out.opacity[0]), 0.0)
        self.assertEqual(float(out.depth[0]), 0.0)
        self.assertTrue(torch.equal(out.color, torch.zeros(1, 3, dtype=DTYPE)))
        self.assertTrue(bool(torch.isfinite(out.normal).all()))


class TestWallOpacity(unittest.TestCase):
    """Rays ending on the room walls of an exact scene."""

    @classmethod
    def setUpClass(cls):
        cls.scene = default_scene()
        cls.fields = AnalyticFields(cls.scene, beta=0.01)
        # origin to the -x wall at distance 1, clear of table and ball
        cls.origins = np.zeros((1, 3))
        cls.directions = np.array([[-1.0, 0.0, 0.0]])

    def _render(self, margin):
        far = ray_far_bounds(self.origins, self.directions, self.scene.bounds, 0.02, margin=margin)
        return render_rays(self.fields, self.origins, self.directions, 0.02, far, 256)

    def test_padded_far_bound_makes_wall_opaque(self):
        out = self._render(margin=1.0)
        self.assertGreater(float(out.opacity[0]), 0.99)
        self.assertLess(abs(float(out.depth[0]) - 1.0), 0.03)
        np.testing.assert_allclose(out.normal.numpy()[0], [1.0, 0.0, 0.0], atol=1e-3)

    def test_far_bound_on_the_wall_stays_translucent(self):
        out = self._render(margin=0.0)
        self.assertLess(float(out.opacity[0]), 0.5)

    def test_rendered_view_of_exact_room_is_opaque(self):
        cam = CameraModel(6.0, 6.0, 3.0, 3.0, 6, 6, look_at_pose((0.6, 0.0, 0.2), (0.0, 0.0, -0.4)))
        service = RenderingService(self.fields, self.scene.bounds, 0.02, 256, margin=1.0)
        images = service.render_view(cam)
        self.assertGreater(float(images['opacity'].min()), 0.99)


class TestRenderRays(unittest.TestCase):
    """Test rendering through real scene fields."""

    @classmethod
    def setUpClass(cls):
        cls.fields = tiny_fields(seed=0, sphere_inside_out=True)

    def test_outputs_shapes_and_ranges(self):
        rng = np.random.default_rng(0)
        dirs = rng.normal(size=(6, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        out = render_rays(self.fields, np.zeros((6, 3)), dirs, 0.02, 1.4, 24, rng)
        self.assertEqual(tuple(out.color.shape), (6, 3))
        self.assertEqual(tuple(out.weights.shape), (6, 24))
        self.assertTrue(bool(((out.opacity >= 0) & (out.opacity <= 1 + 1e-12)).all()))
        self.assertTrue(bool(((out.color >= 0) & (out.color <= 1)).all()))
        self.assertTrue(bool(((out.plane_prob >= 0) & (out.plane_prob <= 1)).all()))
        self.assertEqual(tuple(out.surface_points().shape), (6, 3))

    def test_depth_of_inside_out_sphere(self):
        """Rays from the centre of a unit inside-out sphere stop near distance 1."""
        ray = Ray((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        out = render_ray(self.fields, ray, 0.02, math.sqrt(3.0), 64)
        self.assertEqual(len(out), 1)
        self.assertLess(abs(float(out.depth[0]) - 1.0), 0.25)

    def test_differentiable_in_parameters_and_beta(self):
        ray = Ray((0.0, 0.0, 0.0), (0.0, 1.0, 0.0))
        out = render_ray(self.fields, ray, 0.02, 1.5, 16)
        (out.color.sum() + out.depth.sum() + out.normal.sum() + out.plane_prob.sum()).backward()
        self.assertIsNotNone(self.fields.log_beta.grad)
        self.assertTrue(any(p.grad is not None and p.grad.abs().sum() > 0 for p in self.fields.geometry.parameters()))
        self.fields.zero_grad(set_to_none=True)

    def test_render_view(self):
        cam = CameraModel(4.0, 4.0, 2.0, 2.0, 4, 3, look_at_pose((0.1, 0.0, 0.0), (0.5, 0.5, 0.0)))
        service = RenderingService(self.fields, Bounds(-np.ones(3), np.ones(3)), 0.02, 16, chunk=5)
        images = service.render_view(cam)
        self.assertEqual(images['color'].shape, (3, 4, 3))
        self.assertEqual(images['depth'].shape, (3, 4))
        self.assertEqual(images['normal'].shape, (3, 4, 3))
        self.assertTrue(np.all(images['depth'] > 0))


def run_tests():
    """Run all tests."""
    unittest.main(argv=[''], verbosity=2, exit=False)


if __name__ == '__main__':
    run_tests()
