"""Slicing of vector fields along curvilinear projections generated by ``x'' = F(x, x')``."""

from .field import (Box, MetricChart, QuadraticField, QuadraticSurface, conformal_chart,
                    field_from_config, halfspace_chart, sphere_chart, zero_field)
from .geodesics import ODESettings, Trajectory, exp_map, exp_inverse, integrate
from .gridfield import GridField, Slice1D, extract_slice, extract_slices
from .projections import (CurvilinearProjection, Parametrization, ProjectionFamily,
                          build_family, build_parametrization)
from .bv1d import (JumpField, analyze_slice, eta_xi, integral_geometric, jump_slicing_check,
                   mu_xi_u)
from .symgrad import GradientReport, SymMatrix, bound_checks, reconstruct_e
from .manifold import Chart, OneForm, manifold_gradient_bound, manifold_slice

__version__ = "0.1.0"

__all__ = [
    "Box", "MetricChart", "QuadraticField", "QuadraticSurface", "conformal_chart",
    "field_from_config", "halfspace_chart", "sphere_chart", "zero_field",
    "ODESettings", "Trajectory", "exp_map", "exp_inverse", "integrate",
    "GridField", "Slice1D", "extract_slice", "extract_slices",
    "CurvilinearProjection", "Parametrization", "ProjectionFamily", "build_family",
    "build_parametrization",
    "JumpField", "analyze_slice", "eta_xi", "integral_geometric", "jump_slicing_check", "mu_xi_u",
    "GradientReport", "SymMatrix", "bound_checks", "reconstruct_e",
    "Chart", "OneForm", "manifold_gradient_bound", "manifold_slice",
]
