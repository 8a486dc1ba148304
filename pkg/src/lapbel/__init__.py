"""Integral-equation solvers for the Laplace-Beltrami problem on closed
surfaces, with locally corrected Nystrom quadrature, a multi-density point
FMM, and harmonic-vector-field computation via Hodge decomposition."""

__version__ = "0.1.0"

from .kernels import KernelKind, eval_kernel
from .shapes import build_sphere, build_torus, build_twisted_torus
from .surface import (
    SurfaceDiscretization,
    mean_curvature,
    surface_divergence,
    surface_gradient,
    surface_integral,
    averaging_w,
    interpolate_to_oversampled,
)
from .quadrature import (
    NearCorrections,
    NearMap,
    adaptive_patch_integral,
    build_near_map,
    compute_corrections,
)
from .fmm import FmmPlan, FmmResult, FmmSources, evaluate_direct, evaluate_fmm
from .operators import DensityVector, LayerOperatorSet, assemble_dense
from .solver import SolveConfig, SolveReport, gmres, solve_laplace_beltrami
from .hodge import (
    HodgeResult,
    TangentialField,
    current_source_field,
    harmonic_basis,
    hodge_decompose,
    random_legendre_field,
)

__all__ = [
    "KernelKind", "eval_kernel",
    "build_sphere", "build_torus", "build_twisted_torus",
    "SurfaceDiscretization", "mean_curvature", "surface_divergence",
    "surface_gradient", "surface_integral", "averaging_w",
    "interpolate_to_oversampled",
    "NearCorrections", "NearMap", "adaptive_patch_integral",
    "build_near_map", "compute_corrections",
    "FmmPlan", "FmmResult", "FmmSources", "evaluate_direct", "evaluate_fmm",
    "DensityVector", "LayerOperatorSet", "assemble_dense",
    "SolveConfig", "SolveReport", "gmres", "solve_laplace_beltrami",
    "HodgeResult", "TangentialField", "current_source_field",
    "harmonic_basis", "hodge_decompose", "random_legendre_field",
]
