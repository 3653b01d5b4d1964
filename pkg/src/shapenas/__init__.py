"""Elastic-width transformer supernet training and shape search."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    InfeasibleError,
    NumericError,
    ShapenasError,
    ValidationError,
)
from .supernet import (
    BackboneConfig,
    DesignSpace,
    Supernet,
    build_supernet,
    count_params,
    layer_flops_formula,
    layer_params_formula,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    MaskingPolicy,
    TrainingConfig,
    TrainLog,
    evaluate_perplexity,
    mask_batch,
    sample_random,
    sample_sandwich,
    super_pretrain,
    train_step,
)
from .search import (
    Candidate,
    Constraint,
    SearchConfig,
    brute_force_search,
    check_constraint,
    crossover,
    evolve,
    mutate,
)
from .surrogate import (
    FitReport,
    GbtHyperparams,
    SurrogateModel,
    SurrogateSample,
    collect_perplexity_dataset,
    fit_gbt,
    fit_predictor,
    pearson,
    r2,
    spearman,
)
from .latency import BenchParams, LatencyRecord, build_latency_dataset, measure_latency
from .heuristics import (
    HeuristicSpec,
    cigar_scale,
    correlation_study,
    diagonal_profile,
    shape_diff,
    templated_shape,
)

__all__ = [
    "BackboneConfig",
    "BenchParams",
    "Candidate",
    "ConfigError",
    "Constraint",
    "DataError",
    "DesignSpace",
    "FitReport",
    "FormatError",
    "GbtHyperparams",
    "HeuristicSpec",
    "InfeasibleError",
    "LatencyRecord",
    "MaskingPolicy",
    "NumericError",
    "SearchConfig",
    "ShapenasError",
    "Supernet",
    "SurrogateModel",
    "SurrogateSample",
    "TrainLog",
    "TrainingConfig",
    "ValidationError",
    "build_latency_dataset",
    "build_supernet",
    "brute_force_search",
    "check_constraint",
    "cigar_scale",
    "collect_perplexity_dataset",
    "correlation_study",
    "count_params",
    "crossover",
    "diagonal_profile",
    "evaluate_perplexity",
    "evolve",
    "fit_gbt",
    "fit_predictor",
    "layer_flops_formula",
    "layer_params_formula",
    "load_checkpoint",
    "mask_batch",
    "measure_latency",
    "mutate",
    "pearson",
    "r2",
    "sample_random",
    "sample_sandwich",
    "save_checkpoint",
    "shape_diff",
    "spearman",
    "super_pretrain",
    "templated_shape",
    "train_step",
    "__version__",
]
