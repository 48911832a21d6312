"""
Unit tests for mesh extraction, surface sampling and the reconstruction metrics.
"""

import sys
import os
import unittest

import numpy as np
from scipy.spatial.distance import cdist

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))
sys.path.insert(0, os.path.dirname(__file__))

from errors import DomainError
from helpers import tiny_fields
from services.meshing_service import (
    METRIC_COLUMNS,
    MeshingService,
    MetricsReport,
    TriangleMesh,
    eval_metrics,
    fields_sdf,
    marching_cubes,
    sample_mesh_surface,
)
from utils.geometry import Bounds

UNIT_BOX = Bounds(-np.ones(3), np.ones(3))


def sphere_sdf(radius):
    return lambda p: np.linalg.norm(p, axis=-1) - radius


def box_sdf(half):
    def sdf(p):
        q = np.abs(p) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside
    return sdf


class TestMarchingCubes(unittest.TestCase):
    """Test level-set extraction."""

    def test_sphere_vertices_near_radius(self):
        res = 64
        mesh = marching_cubes(sphere_sdf(0.5), UNIT_BOX, res)
        self.assertFalse(mesh.is_empty)
        h = 2.0 / (res - 1)
        radii = np.linalg.norm(mesh.vertices, axis=-1)
        self.assertLess(np.abs(radii - 0.5).max(), 2 * h)
        self.assertAlmostEqual(mesh.area(), 4 * np.pi * 0.25, delta=0.05 * np.pi)

    def test_constant_field_gives_empty_mesh(self):
        mesh = marching_cubes(lambda p: np.ones(len(p)), UNIT_BOX, 16)
        self.assertTrue(mesh.is_empty)
        self.assertEqual(mesh.area(), 0.0)

    def test_box_area(self):
        mesh = marching_cubes(box_sdf(0.5), UNIT_BOX, 128)
        self.assertAlmostEqual(mesh.area(), 6.0, delta=0.3)

    def test_chunking_does_not_change_result(self):
        a = marching_cubes(sphere_sdf(0.4), UNIT_BOX, 20)
        b = marching_cubes(sphere_sdf(0.4), UNIT_BOX, 20, chunk=97)
        np.testing.assert_array_equal(a.vertices, b.vertices)
        np.testing.assert_array_equal(a.faces, b.faces)

    def test_invalid_resolution(self):
        with self.assertRaises(DomainError):
            marching_cubes(sphere_sdf(0.5), UNIT_BOX, 1)


class TestTriangleMesh(unittest.TestCase):
    """Test the mesh container."""

    def test_rejects_bad_indices(self):
        with self.assertRaises(DomainError):
            TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])

    def test_cleaned_drops_degenerate_faces(self):
        vertices = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 2, 2], [5, 5, 5]]
        mesh = TriangleMesh(vertices, [[0, 1, 2], [3, 3, 3]])
        clean = mesh.cleaned()
        self.assertEqual(len(clean.faces), 1)
        self.assertEqual(len(clean.vertices), 3)
        self.assertAlmostEqual(clean.area(), 0.5)


class TestSampleMeshSurface(unittest.TestCase):
    """Test area-weighted surface sampling."""

    def test_points_lie_in_single_triangle(self):
        mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        pts = sample_mesh_surface(mesh, 500, seed=1)
        self.assertEqual(pts.shape, (500, 3))
        np.testing.assert_allclose(pts[:, 2], 0.0, atol=1e-12)
        self.assertTrue(np.all(pts[:, 0] >= -1e-12))
        self.assertTrue(np.all(pts[:, 1] >= -1e-12))
        self.assertTrue(np.all(pts[:, 0] + pts[:, 1] <= 1.0 + 1e-12))

    def test_area_weighting(self):
        # triangle at z=0 has three times the area of the one at z=5
        vertices = [[0, 0, 0], [3, 0, 0], [0, 1, 0], [0, 0, 5], [1, 0, 5], [0, 1, 5]]
        mesh = TriangleMesh(vertices, [[0, 1, 2], [3, 4, 5]])
        pts = sample_mesh_surface(mesh, 8000, seed=2)
        self.assertAlmostEqual(float(np.mean(pts[:, 2] < 1.0)), 0.75, delta=0.03)

    def test_seed_determinism(self):
        mesh = marching_cubes(sphere_sdf(0.5), UNIT_BOX, 16)
        np.testing.assert_array_equal(sample_mesh_surface(mesh, 100, 3), sample_mesh_surface(mesh, 100, 3))

    def test_empty_mesh_raises(self):
        with self.assertRaises(DomainError):
            sample_mesh_surface(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), 10)


class TestEvalMetrics(unittest.TestCase):
    """Test accuracy, completeness, precision, recall and F-score."""

    def test_identical_clouds(self):
        pts = np.random.default_rng(0).random((200, 3))
        report = eval_metrics(pts, pts, 0.05)
        self.assertEqual(report.accuracy, 0.0)
        self.assertEqual(report.completeness, 0.0)
        self.assertEqual(report.f_score, 1.0)

    def test_shift_by_ten_thresholds(self):
        grid = np.stack(np.meshgrid(*(np.arange(3.0),) * 3, indexing='ij'), -1).reshape(-1, 3)
        tau = 0.01
        report = eval_metrics(grid + np.array([10 * tau, 0.0, 0.0]), grid, tau)
        self.assertAlmostEqual(report.accuracy, 0.1)
        self.assertAlmostEqual(report.completeness, 0.1)
        self.assertEqual((report.precision, report.recall, report.f_score), (0.0, 0.0, 0.0))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        pred, gt = rng.random((150, 3)), rng.random((220, 3))
        d = cdist(pred, gt)
        report = eval_metrics(pred, gt, 0.1)
        self.assertAlmostEqual(report.accuracy, d.min(axis=1).mean(), places=12)
        self.assertAlmostEqual(report.completeness, d.min(axis=0).mean(), places=12)
        p = np.mean(d.min(axis=1) < 0.1)
        r = np.mean(d.min(axis=0) < 0.1)
        self.assertAlmostEqual(report.precision, p)
        self.assertAlmostEqual(report.recall, r)
        self.assertAlmostEqual(report.f_score, 2 * p * r / (p + r))

    def test_swap_symmetry(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((80, 3)), rng.random((120, 3))
        ab, ba = eval_metrics(a, b, 0.1), eval_metrics(b, a, 0.1)
        self.assertAlmostEqual(ab.accuracy, ba.completeness)
        self.assertAlmostEqual(ab.precision, ba.recall)
        self.assertAlmostEqual(ab.f_score, ba.f_score)

    def test_invalid_inputs(self):
        with self.assertRaises(DomainError):
            eval_metrics(np.zeros((0, 3)), np.zeros((3, 3)), 0.1)
        with self.assertRaises(DomainError):
            eval_metrics(np.zeros((3, 3)), np.zeros((3, 3)), 0.0)

    def test_report_formatting(self):
        report = MetricsReport(0.01, 0.02, 0.9, 0.8, 0.847, 0.05, 10, 12)
        self.assertEqual(MetricsReport.csv_header().split(',')[:5], list(METRIC_COLUMNS))
        self.assertTrue(report.csv_row().startswith('0.010000,0.020000,0.900000,0.800000,0.847000'))
        self.assertIn('F-score  0.8470', report.pretty())
        self.assertEqual(report.as_dict()['Recall'], 0.8)


class TestMeshingService(unittest.TestCase):
    """Test extraction from neural fields."""

    def test_extract_and_evaluate_sphere_fields(self):
        fields = tiny_fields(sphere_radius=0.5, sphere_inside_out=False, sphere_refine_steps=200)
        service = MeshingService(UNIT_BOX, resolution=24)
        mesh = service.extract(fields)
        self.assertFalse(mesh.is_empty)
        radii = np.linalg.norm(mesh.vertices, axis=-1)
        self.assertLess(np.abs(radii - 0.5).max(), 0.2)

        sdf = fields_sdf(fields)
        self.assertEqual(sdf(np.zeros((4, 3))).shape, (4,))

        dirs = np.random.default_rng(3).normal(size=(500, 3))
        gt = 0.5 * dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        report, pred = service.evaluate(mesh, gt, threshold=0.2, n_samples=300, seed=0)
        self.assertEqual(pred.shape, (300, 3))
        self.assertGreater(report.f_score, 0.8)

    def test_padding_recovers_walls_on_box_faces(self):
        service = MeshingService(UNIT_BOX, resolution=45, padding=0.1)
        np.testing.assert_allclose(service.bounds.lo, -1.1)
        np.testing.assert_allclose(service.bounds.hi, 1.1)

        def room(points):
            return -box_sdf(1.0)(points)

        mesh = marching_cubes(room, service.bounds, service.resolution)
        self.assertAlmostEqual(mesh.area(), 24.0, delta=1.5)
        np.testing.assert_allclose(np.abs(mesh.vertices).max(axis=-1), 1.0, atol=0.06)

    def test_invalid_resolution(self):
        with self.assertRaises(DomainError):
            MeshingService(UNIT_BOX, resolution=1)
        with self.assertRaises(DomainError):
            MeshingService(UNIT_BOX, padding=-0.1)


def run_tests():
    """Run all tests."""
    unittest.main(argv=[''], verbosity=2, exit=False)


if __name__ == '__main__':
    run_tests()
