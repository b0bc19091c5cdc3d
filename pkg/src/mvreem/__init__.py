"""Multivariate regression trees with correlated random effects for panel data."""

from .data import (
    CsvSchema,
    DataError,
    Family,
    LongitudinalDataset,
    StandardizationTransform,
    get_family,
    inverse_transform,
    load_csv,
    standardize,
)
from .tree import (
    ComplexityPath,
    GrowControls,
    MultivariateTree,
    SplitRule,
    best_split,
    cost_complexity_path,
    grow_tree,
    node_impurity,
    predict_tree,
    prune_at,
    select_by_cv,
    structure_equal,
)
from .mixed_model import (
    FitError,
    FittedMixedModel,
    MixedModelSpec,
    blup_random_effects,
    fit_mvlmm,
    log_likelihood,
    log_likelihood_gradient,
    predict_mixed,
)
from .reem import (
    ReemModel,
    ReemOptions,
    fit_baseline,
    fit_generalized_reem,
    fit_reem,
    predict_reem,
    pseudo_response,
)
from .metrics import (
    EvaluationReport,
    emse_fixed,
    pmse,
    re_pmse,
    recovery_rate,
    sigma12_emse,
)
from .simulate import (
    SimulatedPair,
    SimulationConfig,
    generate_pair,
    generate_predictors,
    run_experiment,
    true_tree,
)

__version__ = "0.1.0"
