"""Gradient-free Bayesian inference for physics-informed Chebyshev KAN surrogates.

Dropout Tikhonov ensemble Kalman inversion (DTEKI), its active-subspace
variant (SDTEKI), and a benchmark harness for four PDE inverse/forward
problems (advection transport, multiscale diffusion, a nonlinear reaction
equation, and 2D Darcy flow).
"""

from .numerics import SeededRng, spd_solve, thin_svd
from .surrogate import (
    ChebKanNet,
    MlpNet,
    ckan_eval_with_derivs,
    ckan_forward,
    ckan_param_jacobian,
    ckan_template,
    flatten,
    mlp_eval_with_derivs,
    mlp_forward,
    mlp_param_jacobian,
    mlp_template,
    unflatten,
)

__version__ = "0.1.0"

__all__ = [
    "SeededRng",
    "spd_solve",
    "thin_svd",
    "ChebKanNet",
    "MlpNet",
    "ckan_forward",
    "ckan_eval_with_derivs",
    "ckan_param_jacobian",
    "ckan_template",
    "mlp_forward",
    "mlp_eval_with_derivs",
    "mlp_param_jacobian",
    "mlp_template",
    "flatten",
    "unflatten",
    "__version__",
]
