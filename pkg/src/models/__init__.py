"""
Models package for sdfrecon.

Coordinate MLPs with their differentiation helpers, and the scene fields
built from them.
"""

from .mlp import DTYPE, DiffContext, Mlp, MlpSpec, sphere_init
from .fields import FieldSample, SceneFields

__all__ = ['DTYPE', 'DiffContext', 'Mlp', 'MlpSpec', 'sphere_init', 'FieldSample', 'SceneFields']
