"""Robust Bayesian Copas selection model for publication bias in meta-analysis.

Heavy-tailed random-effects families (normal, Laplace, Student's t, slash)
are fitted by Metropolis-within-Gibbs sampling, compared by DIC, and the
size of the bias correction is summarized by the Hellinger-distance D
measure.
"""

__version__ = "0.1.0"

from .analysis import AnalysisResult, RbcFit, analyze, fit_rbc
from .bias_measure import DReport, compute_d_measure, interpret_d
from .data import DataError, MetaDataset, Study, parse_dataset, read_dataset, \
    serialize_dataset, standardized_deviates, validate
from .distributions import DensityGrid, EffectsFamily, hellinger, kde
from .likelihood import CopasParams, copas_deviance, fit_sma
from .model_selection import DicResult, compute_dic, select_model
from .sampler import Chain, PriorConfig, SamplerConfig, diagnostics, posterior_summary, \
    run_chains
from .simulation import ExperimentResult, SimConfig, run_experiment, simulate_copas

__all__ = [
    "AnalysisResult", "Chain", "CopasParams", "DReport", "DataError", "DensityGrid",
    "DicResult", "EffectsFamily", "ExperimentResult", "MetaDataset", "PriorConfig",
    "RbcFit", "SamplerConfig", "SimConfig", "Study", "analyze", "compute_d_measure",
    "compute_dic", "copas_deviance", "diagnostics", "fit_rbc", "fit_sma", "hellinger",
    "interpret_d", "kde", "parse_dataset", "posterior_summary", "read_dataset",
    "run_chains", "run_experiment", "select_model", "serialize_dataset", "simulate_copas",
    "standardized_deviates", "validate",
]
