"""flowsuff: label-free embedding model ranking via flow-based information
sufficiency, with finite-sample bound and diagnostic suites."""

from .analysis import (
    AblationCurve,
    CorrelationReport,
    GroundTruth,
    cond_only_score,
    loo_bootstrap,
    pairwise_preference_test,
    rank_correlations,
    shuffle_ablation,
    shuffle_is_curve,
    subsample_stability,
    top3_overlap,
    weight_perturbation_sweep,
)
from .baselines import (
    SyntheticPoolSpec,
    gaussian_mi_closed_form,
    gen_correlated_gaussians,
    gen_synthetic_pool,
    uniformity_score,
)
from .data import EmbeddingSet, import_npy, read_embeddings, write_embeddings
from .diagnostics import (
    BoundInputs,
    BoundReport,
    bound_report,
    compound_amplification,
    estimate_d_eff,
    estimate_sigma_bar,
    generalization_bound,
    jacobian_jvp,
    layer_direction_stats,
    layer_displacement_and_amplification,
    total_amplification,
)
from .errors import (
    ConfigError,
    ContractViolation,
    DataError,
    DensityError,
    DivergenceError,
    FlowSuffError,
    InvertibilityError,
    TrainingFailure,
)
from .flow import FlowConfig, FlowModel, build_flow, clone_to_conditional, rqs_transform
from .flow_io import load_flow, save_flow
from .numcore import AdamW, EmaState, Mlp, ParamTensor, RngStream, seeded_rng, spectral_norm_probe
from .pipeline import RunConfig, load_run_config, run_pipeline, write_report
from .sufficiency import (
    EntropyEstimates,
    ISMatrix,
    ModelScore,
    PoolSettings,
    aggregate_scores,
    information_sufficiency,
    pairwise_is_matrix,
    rank_models,
)
from .training import SplitSpec, TrainConfig, TrainRecord, split_dataset, train_conditional, train_marginal

__version__ = "0.1.0"
