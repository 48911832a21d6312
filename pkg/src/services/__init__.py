"""
Services package for sdfrecon.

This package contains service classes for each pipeline stage: rendering,
sparse depth from correspondences, plane segmentation, meshing and
evaluation, synthetic scenes and training.
"""

from .rendering_service import RenderingService
from .sparse_depth_service import SparseDepthService
from .plane_service import PlaneSegmentationService
from .meshing_service import MeshingService
from .synth_service import SynthService
from .training_service import TrainingService

__all__ = [
    'RenderingService',
    'SparseDepthService',
    'PlaneSegmentationService',
    'MeshingService',
    'SynthService',
    'TrainingService',
]
