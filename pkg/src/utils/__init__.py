"""
Utils package for sdfrecon.

This package contains the data models, camera geometry and file tools.
"""

from .dataModel import Albedo, Dataset, DatasetView, Primitive, RunDir, SceneSpec
from .geometry import Bounds, CameraModel, Ray
from .tools import CheckpointStore, load_dataset, save_dataset

__all__ = [
    'Albedo', 'Dataset', 'DatasetView', 'Primitive', 'RunDir', 'SceneSpec',
    'Bounds', 'CameraModel', 'Ray',
    'CheckpointStore', 'load_dataset', 'save_dataset',
]
