"""Boundary integral solver for electromagnetic scattering from axisymmetric
open cavities in a perfectly conducting half-space."""

from .geometry import CavityGeometry, named_geometry, panelize
from .harness import (LoopSource, PlaneWave, run_k_sweep, run_loop_test,
                      run_planewave)
from .solver import (BoundaryData, CavityProblem, Formulation, MeshConfig,
                     SolveConfig, mode_loop)
from .fields import evaluate, eval_E, eval_H

__all__ = [
    "BoundaryData", "CavityGeometry", "CavityProblem", "Formulation", "LoopSource",
    "MeshConfig", "PlaneWave", "SolveConfig", "eval_E", "eval_H", "evaluate", "mode_loop",
    "named_geometry", "panelize", "run_k_sweep", "run_loop_test", "run_planewave",
]
