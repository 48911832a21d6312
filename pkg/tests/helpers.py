"""
Shared fixtures for the test modules: tiny configurations and fields that
keep the numerical tests fast.
"""

import sys
import os

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from config import TrainConfig
from models.fields import SceneFields


def tiny_config(**overrides) -> TrainConfig:
    """Small networks, few samples; every other knob keeps its default."""
    base = dict(
        geo_hidden_layers=2,
        geo_width=32,
        geo_skips=(),
        feature_dim=8,
        geo_num_freqs=2,
        color_hidden_layers=1,
        color_width=16,
        color_dir_freqs=2,
        plane_hidden_layers=1,
        plane_width=16,
        plane_num_freqs=2,
        sphere_refine_steps=100,
        batch_rays=32,
        samples_per_ray=16,
        eikonal_uniform=16,
        eikonal_near_surface=16,
        iterations=10,
        checkpoint_interval=5,
        log_interval=5,
        mesh_resolution=24,
        metric_samples=2000,
    )
    base.update(overrides)
    cfg = TrainConfig().replace(**base)
    cfg.validate()
    return cfg


def tiny_fields(seed: int = 0, **overrides) -> SceneFields:
    return SceneFields.from_config(tiny_config(**overrides), seed=seed)


def tiny_dataset(n_views: int = 3, size: int = 16, n_points: int = 200, seed: int = 0):
    """
    Synthetic room rendered at ``size`` x ``size`` with noiseless correspondences
    and dense depth, built in memory.
    """
    import numpy as np

    from services.synth_service import default_scene, make_correspondences, render_gt_views, ring_cameras
    from utils.dataModel import Dataset, DatasetView

    scene = default_scene()
    cams = ring_cameras(n_views, size, size)
    views = render_gt_views(scene, cams)
    matches, _ = make_correspondences(scene, cams, n_points, 0.0, np.random.default_rng(seed))
    return Dataset(
        root='<memory>',
        views=[DatasetView(i, v.image, v.camera, v.depth) for i, v in enumerate(views)],
        bounds=scene.bounds,
        matches=matches,
        scene=scene,
    )
