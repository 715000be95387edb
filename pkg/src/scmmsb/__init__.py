"""Sparse co-evolving mixed-membership stochastic blockmodel.

Dynamic networks (:mod:`.network`), the generative model (:mod:`.model`),
SGLD posterior inference (:mod:`.sgld`) and change-point evaluation
(:mod:`.evaluate`).
"""

from .evaluate import (
    Alignment,
    ChangeReport,
    affinity_distance_series,
    aic,
    align_labels,
    change_report,
    detect_global_changes,
    local_change_scores,
    param_count,
    perplexity,
    recovery_error,
)
from .model import (
    DomainError,
    GroundTruth,
    LatentState,
    ModelParams,
    generate_synthetic,
    link_probability,
    log_joint,
    membership_simplex,
    neighbor_influence,
    sample_network,
    sample_trajectory,
    transition_mean,
)
from .network import DynamicNetwork, MalformedInputError, load_snapshots, neighbors, write_snapshots
from .sgld import (
    NumericalError,
    PosteriorSummary,
    SgldConfig,
    SgldSampler,
    run_inference,
    step_size,
    update_beta,
    update_noise_params,
)

__version__ = "0.1.0"

__all__ = [
    "Alignment", "ChangeReport", "DomainError", "DynamicNetwork", "GroundTruth", "LatentState",
    "MalformedInputError", "ModelParams", "NumericalError", "PosteriorSummary", "SgldConfig",
    "SgldSampler", "affinity_distance_series", "aic", "align_labels", "change_report",
    "detect_global_changes", "generate_synthetic", "link_probability", "load_snapshots",
    "local_change_scores", "log_joint", "membership_simplex", "neighbor_influence", "neighbors",
    "param_count", "perplexity", "recovery_error", "run_inference", "sample_network",
    "sample_trajectory", "step_size", "transition_mean", "update_beta", "update_noise_params",
    "write_snapshots",
]
