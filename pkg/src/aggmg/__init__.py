"""Adaptive aggregation multigrid for discontinuous Galerkin discretisations."""

from .dg import ProblemSpec, assemble
from .hierarchy import MgHierarchy, SetupConfig, build
from .linalg import BlockPartition, SparseMatrix
from .meshgraph import CartesianMeshSpec, ElementGraph, build_cartesian
from .partition import AggregateHierarchy, build_hierarchy
from .smoother import SmootherSpec, StopRule, build_smoother, smooth
from .solver import CycleConfig, SolveReport, mg_preconditioner, pcg, pgmres, solve_mg, vcycle

__version__ = "0.1.0"

__all__ = [
    "ProblemSpec",
    "assemble",
    "MgHierarchy",
    "SetupConfig",
    "build",
    "BlockPartition",
    "SparseMatrix",
    "CartesianMeshSpec",
    "ElementGraph",
    "build_cartesian",
    "AggregateHierarchy",
    "build_hierarchy",
    "SmootherSpec",
    "StopRule",
    "build_smoother",
    "smooth",
    "CycleConfig",
    "SolveReport",
    "mg_preconditioner",
    "pcg",
    "pgmres",
    "solve_mg",
    "vcycle",
]
