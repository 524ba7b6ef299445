"""Differentially private spherical-cap clustering with consensus-aware federated training."""

from .clustering import (
    ClusteringParams,
    ClusteringReport,
    SanitizedCluster,
    densest_cap,
    pairwise_angles,
    run_clustering,
)
from .dp import (
    DEFAULT_DELTA,
    MechanismCalibration,
    PrivacyBudget,
    PrivacyLedger,
    cosine_floor,
    gaussian_perturb,
    naive_sigma,
    norm_tail_probability,
    sigma_tight,
    sigma_weak,
)
from .federation import (
    ClientState,
    FederationConfig,
    RunReport,
    ServerState,
    aggregate_fedavg,
    client_local_round,
    derive_rng,
    fedsgd_round,
    run_federation,
)
from .geometry import (
    angle_between,
    normalize,
    normalize_rows,
    occupancy_ratio,
    reg_inc_beta,
    sample_uniform_direction,
    sample_uniform_directions,
)
from .losses import (
    ConsensusContext,
    GradientBundle,
    LossConfig,
    classification_loss,
    cluster_similarity,
    consensus_loss,
    finite_diff_check,
    loss_gradients,
    margin_similarity,
)
from .synth import (
    AttackGallery,
    SynthParams,
    SyntheticFederation,
    VerificationPairs,
    cross_client_margin,
    gallery_from_directions,
    generate_federation,
    knn_attack,
    make_verification_pairs,
    verification_eval,
)

__version__ = "0.1.0"
