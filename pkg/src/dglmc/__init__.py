"""Distributed Langevin-within-Gibbs sampling on a split (augmented) target."""

from .baselines import (GaussianLaw, chain_stationary_gaussian, exact_axda_marginal_gaussian,
                        exact_gaussian_posterior, gaussian_w2, run_dsgld, run_mala)
from .diagnostics import HpdSummary, acf, hpd_error, iat, moments_with_se
from .engine import ClusterProfile, DivergenceError, RunConfig, RunReport, run_dglmc
from .estimators import DGLMCGaussianMean, DGLMCLogisticRegression
from .kernels import ChainState, HyperParams, lmc_local_step, make_hyperparams, master_draw
from .model import (GaussianPotential, LogisticPotential, NegLogPosterior, ShardedDataset,
                    gaussian_model, logistic_model)
from .tuning import (axda_bias_bound, check_contraction, guideline_hyperparams, kappa_gamma,
                     mixing_budget)

__version__ = "0.1.0"

__all__ = [
    "DGLMCLogisticRegression", "DGLMCGaussianMean",
    "GaussianLaw", "chain_stationary_gaussian", "exact_axda_marginal_gaussian",
    "exact_gaussian_posterior", "gaussian_w2", "run_dsgld", "run_mala", "HpdSummary", "acf",
    "hpd_error", "iat", "moments_with_se", "ClusterProfile", "DivergenceError", "RunConfig",
    "RunReport", "run_dglmc", "ChainState", "HyperParams", "lmc_local_step", "make_hyperparams",
    "master_draw", "GaussianPotential", "LogisticPotential", "NegLogPosterior", "ShardedDataset",
    "gaussian_model", "logistic_model", "axda_bias_bound", "check_contraction",
    "guideline_hyperparams", "kappa_gamma", "mixing_budget",
]
