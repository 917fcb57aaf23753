"""Finite element solver for a diffuse interface tumour growth model.

Cahn-Hilliard phase field coupled to a nutrient reaction-diffusion equation,
discretised with mass-lumped P1 elements and a convex-concave implicit Euler
scheme solved by Newton's method.
"""

__version__ = "0.1.0"

from .fem import P1Space
from .mesh import Marker, SimplicialMesh, build_box_mesh, build_interval_mesh, build_rect_mesh
from .model import AssumptionError, ModelParams, check_assumptions, compute_dt_star
from .solver import StateTriple, build_initial_state, run, step

__all__ = [
    "P1Space",
    "Marker",
    "SimplicialMesh",
    "build_interval_mesh",
    "build_rect_mesh",
    "build_box_mesh",
    "ModelParams",
    "AssumptionError",
    "check_assumptions",
    "compute_dt_star",
    "StateTriple",
    "build_initial_state",
    "run",
    "step",
]
