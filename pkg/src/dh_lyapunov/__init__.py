"""Numerical laboratory for the Lyapunov exponent of products of [[1, eps], [eps Z, Z]]."""

__version__ = "0.1.0"

from .alpha_delta import AlphaReport, alpha_report, c_beta, find_delta, solve_alpha, winding_count
from .chain_sim import ChainConfig, LyapunovEstimate, lyapunov_matrix, lyapunov_mc, lyapunov_s_chain
from .dh_asymptotics import (
    GammaHat,
    PredictionReport,
    TailFit,
    build_gamma_hat,
    compute_C_mu,
    defect_norm,
    fit_head_omega0,
    fit_tail_nu0,
    moment_bound_U,
    powergrowth_diagnostic,
    remainder_exponent,
    scaling_sweep,
)
from .dist_models import DistributionModel, density, make_rng, mellin, ref1, sample, tail_cdf, validate_regime
from .transfer_grid import (
    OperatorConfig,
    TailGrid,
    L_functional,
    apply_S,
    apply_T,
    fixed_point_nu,
    fixed_point_omega0,
    support_bound,
    triple_norm,
)
