"""Graph sparse training: prune-and-regrow edge sparsification for GNNs."""

from .baselines import local_similarity_sparsify, perturb_edges, random_sparsify
from .engine import (
    AnchorGraph,
    GstConfig,
    GstResult,
    MetricsRow,
    combine_criteria,
    find_extreme_sparsity,
    one_shot_prune,
    run_fixed_mask,
    run_gst,
    scheduler_upsilon,
    semantic_scores,
    train_anchor,
    train_dense,
    update_mask,
)
from .graph import (
    DatasetError,
    LabeledSplit,
    UndirectedGraph,
    active_fraction,
    canonicalize_edges,
    generate_sbm,
    graph_sparsity,
    jaccard_edge_similarity,
    load_dataset,
    normalized_adjacency,
    save_dataset,
)
from .harness import ConfigError, eval_spectral, macs_estimate, run_experiment
from .nn import (
    AdamState,
    ForwardTape,
    GcnParams,
    MaskerParams,
    ModelState,
    NumericError,
    adam_step,
    cross_entropy,
    gcn_backward,
    gcn_forward,
    init_model,
    kl_output_divergence,
    masker_scores,
)
from .spectral import (
    EigenPairs,
    EigenSolverError,
    SpectralSummary,
    dense_eig_oracle,
    eigen_variation_scores,
    exact_variation_oracle,
    extremal_eig,
    first_order_edge_deltas,
    spectral_preservation,
)

__version__ = "0.1.0"
