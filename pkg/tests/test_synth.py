"""
Unit tests for the analytic scene and the synthetic dataset generator.
"""

import sys
import os
import shutil
import tempfile
import unittest

import numpy as np
from scipy.spatial import cKDTree

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import DataError
from services.meshing_service import eval_metrics
from services.sparse_depth_service import triangulate_matches
from services.synth_service import (
    SynthService,
    analytic_sdf,
    default_scene,
    gt_point_cloud,
    make_correspondences,
    render_gt_view,
    ring_cameras,
    sphere_trace,
    trace_rays,
)
from utils.dataModel import Albedo, Primitive, SceneSpec
from utils.geometry import Ray, pixels_to_rays


def empty_room() -> SceneSpec:
    return SceneSpec([Primitive('room', 'box', (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), hollow=True)])


class TestAnalyticScene(unittest.TestCase):
    """Test the free-space signed distance."""

    def setUp(self):
        self.scene = default_scene()

    def test_empty_room_values(self):
        room = empty_room()
        self.assertAlmostEqual(analytic_sdf(room, (0.0, 0.0, 0.0)), 1.0)
        self.assertAlmostEqual(analytic_sdf(room, (1.0, 0.0, 0.0)), 0.0)
        self.assertLess(analytic_sdf(room, (0.0, 0.0, 1.2)), 0.0)

    def test_default_scene_values(self):
        self.assertAlmostEqual(analytic_sdf(self.scene, (0.0, 0.0, 0.5)), 0.5)
        self.assertAlmostEqual(analytic_sdf(self.scene, (1.0, 0.0, 0.5)), 0.0)
        # on the table top
        self.assertAlmostEqual(analytic_sdf(self.scene, (0.5, 0.4, -0.4)), 0.0)
        self.assertEqual(analytic_sdf(self.scene, np.zeros((4, 3))).shape, (4,))

    def test_value_is_lower_bound_on_surface_distance(self):
        rng = np.random.default_rng(0)
        surface = gt_point_cloud(self.scene, 20000, rng)
        tree = cKDTree(surface)
        queries = rng.uniform(-0.95, 0.95, size=(300, 3))
        s = analytic_sdf(self.scene, queries)
        free = s > 0
        dist, _ = tree.query(queries[free])
        self.assertTrue(np.all(dist >= s[free] - 1e-9))

    def test_validation_lists_every_problem(self):
        scene = SceneSpec([
            Primitive('a', 'box', (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), hollow=True),
            Primitive('b', 'box', (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), hollow=True),
            Primitive('ball', 'sphere', (0.0, 0.0, 0.0), radius=0.0, albedo=Albedo('stripes')),
        ])
        with self.assertRaises(DataError) as ctx:
            scene.validate()
        self.assertEqual(len(ctx.exception.violations), 3)
        self.assertIn('hollow room', str(ctx.exception))

    def test_yaml_round_trip(self):
        tmp = tempfile.mkdtemp()
        try:
            path = os.path.join(tmp, 'scene.yaml')
            self.scene.save_yaml(path)
            loaded = SceneSpec.load_yaml(path)
            self.assertEqual(loaded.to_dict(), self.scene.to_dict())
            pts = np.random.default_rng(1).uniform(-1, 1, (50, 3))
            np.testing.assert_array_equal(loaded.sdf(pts), self.scene.sdf(pts))
        finally:
            shutil.rmtree(tmp)

    def test_unreadable_yaml(self):
        with self.assertRaises(DataError):
            SceneSpec.load_yaml('/nonexistent/scene.yaml')


class TestSphereTrace(unittest.TestCase):
    """Test ray marching against closed-form intersections."""

    def setUp(self):
        self.scene = default_scene()

    def test_ceiling_from_origin(self):
        hit = sphere_trace(self.scene, Ray((0.0, 0.0, 0.0), (0.0, 0.0, 1.0)))
        self.assertIsNotNone(hit)
        self.assertAlmostEqual(hit.t, 1.0, delta=1e-4)
        np.testing.assert_allclose(hit.normal, [0.0, 0.0, -1.0], atol=1e-4)

    def test_table_top(self):
        hit = sphere_trace(self.scene, Ray((0.5, 0.4, 0.5), (0.0, 0.0, -1.0)))
        self.assertAlmostEqual(hit.t, 0.9, delta=1e-4)
        np.testing.assert_allclose(hit.normal, [0.0, 0.0, 1.0], atol=1e-4)

    def test_ball(self):
        hit = sphere_trace(self.scene, Ray((0.25, 0.15, 0.5), (0.0, 0.0, -1.0)))
        self.assertAlmostEqual(hit.t, 0.5, delta=1e-4)

    def test_outside_the_room_misses(self):
        result = trace_rays(self.scene, np.array([[0.0, 0.0, 3.0]]), np.array([[0.0, 0.0, 1.0]]), max_steps=16)
        self.assertFalse(result.hit[0])
        self.assertTrue(np.isnan(result.t[0]))


class TestGroundTruthViews(unittest.TestCase):
    """Test ground-truth rendering."""

    @classmethod
    def setUpClass(cls):
        cls.scene = default_scene()
        cls.cams = ring_cameras(4, 24, 20)
        cls.view = render_gt_view(cls.scene, cls.cams[0])

    def test_every_pixel_hits(self):
        self.assertTrue(self.view.hit.all())
        self.assertEqual(self.view.image.shape, (20, 24, 3))
        self.assertTrue(np.all((self.view.image >= 0) & (self.view.image <= 1)))

    def test_depth_and_normals_are_consistent(self):
        cam = self.view.camera
        rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing='ij')
        pixels = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=-1)
        origins, dirs = pixels_to_rays(cam, pixels)
        points = origins + self.view.depth.reshape(-1, 1) * dirs
        self.assertLess(np.abs(self.scene.sdf(points)).max(), 1e-4)
        norms = np.linalg.norm(self.view.normal.reshape(-1, 3), axis=-1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)
        # normals face the camera
        self.assertTrue(np.all(np.sum(self.view.normal.reshape(-1, 3) * dirs, axis=-1) < 0))

    def test_rendering_is_deterministic(self):
        again = render_gt_view(self.scene, self.cams[0])
        np.testing.assert_array_equal(again.image, self.view.image)
        np.testing.assert_array_equal(again.depth, self.view.depth)

    def test_service_renders_all_views(self):
        views = SynthService(self.scene, self.cams, workers=2).render()
        self.assertEqual(len(views), 4)
        np.testing.assert_array_equal(views[0].depth, self.view.depth)


class TestSurfaceSamples(unittest.TestCase):
    """Test ground-truth point clouds and correspondences."""

    def setUp(self):
        self.scene = default_scene()

    def test_points_lie_on_visible_surface(self):
        pts = gt_point_cloud(self.scene, 3000, np.random.default_rng(2))
        self.assertEqual(pts.shape, (3000, 3))
        self.assertLess(np.abs(self.scene.sdf(pts)).max(), 1e-4)
        self.assertEqual(eval_metrics(pts, pts, 0.01).f_score, 1.0)

    def test_same_seed_same_cloud(self):
        service = SynthService(self.scene, ring_cameras(2, 8, 8))
        np.testing.assert_array_equal(service.gt_points(500, 7), service.gt_points(500, 7))

    def test_noiseless_correspondences_triangulate_exactly(self):
        cams = ring_cameras(5, 48, 48)
        matches, depths = make_correspondences(self.scene, cams, 300, 0.0, np.random.default_rng(3), window=2)
        self.assertGreater(len(matches), 20)
        self.assertTrue(all(m.view_b - m.view_a <= 2 for m in matches))
        for m, (d_a, d_b) in zip(matches[:100], depths[:100]):
            depth_map = triangulate_matches([m], cams, max_gap=1e-5)
            self.assertEqual(depth_map.stats.accepted, 1)
            self.assertAlmostEqual(depth_map.for_view(m.view_a)[0].depth, d_a, delta=1e-6)
            self.assertAlmostEqual(depth_map.for_view(m.view_b)[0].depth, d_b, delta=1e-6)


def run_tests():
    """Run all tests."""
    unittest.main(argv=[''], verbosity=2, exit=False)


if __name__ == '__main__':
    run_tests()
