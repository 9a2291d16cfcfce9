"""Hierarchical Bayesian vector autoregressions for multi-subject panels.

Three models share one shrinkage prior: subject-specific covariances
(sampled by NUTS), a common covariance (exact conjugate posterior) and a
common diagonal covariance (exact conjugate posterior).
"""

__version__ = "0.1.0"

from .conjugate import (ConjugatePosterior, SubjectStats, combine, fit_conjugate,
                        log_marginal_likelihood, sample_model2, sample_model3, subject_stats)
from .connectivity import (EcEdge, FcEdge, ThresholdRule, ec_extract, fc_extract, group_diff,
                           summarize_scatter)
from .data import (GroupDataset, LagDesign, ShrinkagePrior, SubjectPanel, build_default_prior,
                   build_lag_design, load_group, save_group)
from .draws import PosteriorDraws
from .empirical_bayes import TuneResult, tune
from .hier_sampler import grad_log_target, log_target, nuts_fit, rhat
from .model_eval import WaicReport, pointwise_loglik, waic
from .simulate import GeneratorSpec, generate, gibbs_oracle_model2, mc_marginal_oracle

__all__ = [
    "ConjugatePosterior", "SubjectStats", "combine", "fit_conjugate", "log_marginal_likelihood",
    "sample_model2", "sample_model3", "subject_stats", "EcEdge", "FcEdge", "ThresholdRule",
    "ec_extract", "fc_extract", "group_diff", "summarize_scatter", "GroupDataset", "LagDesign",
    "ShrinkagePrior", "SubjectPanel", "build_default_prior", "build_lag_design", "load_group",
    "save_group", "PosteriorDraws", "TuneResult", "tune", "grad_log_target", "log_target",
    "nuts_fit", "rhat", "WaicReport", "pointwise_loglik", "waic", "GeneratorSpec", "generate",
    "gibbs_oracle_model2", "mc_marginal_oracle",
]
