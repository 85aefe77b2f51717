"""Hierarchical neural hybrid estimation of small failure probabilities."""
from .core import (
    CostLedger, EstimationError, FailureEstimate, FailureLabelVector, HybridConfig,
    ParameterDistribution, SampleBatch, hybrid_estimate, make_rng, mc_estimate, merge_ledgers, sample,
)
from .hierarchical import (
    DiagnosticsConfig, HNHResult, IterationTrace, ModificationState, TrueModelError,
    compose_hnh_value, estimate_failure_probability, iterate, misclassification_diagnostic,
    mixture_weights, modify_labels, predicted_cost,
)
from .surrogate import (
    MlpSurrogate, SurrogateHierarchy, TrainingDivergence, TrainOptions, build_hierarchy,
    init_network, load_surrogate, make_training_set, save_surrogate, train,
)

__version__ = "0.1.0"
