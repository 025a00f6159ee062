"""Variational Bayesian knowledge transfer for latent-split classifiers."""

from .autodiff import (
    GradCheckReport,
    NonFiniteError,
    Tape,
    TapeConsumedError,
    Tensor,
    backward,
    counter_rng,
    forward_op,
    grad_check,
    sample_gaussian,
)
from .data import (
    DomainDataset,
    ShiftSpec,
    augment,
    derive_target,
    generate_source,
    load_dataset,
    save_dataset,
)
from .losses import (
    GmfConfig,
    LossBreakdown,
    RelationConfig,
    TslConfig,
    cross_entropy,
    eb_elbo_loss,
    eb_kl_term,
    gmf_elbo_loss,
    gmf_kl_term,
    huber,
    kl_diag_gaussians,
    relational_term,
    relational_value,
    tsl_loss,
)
from .metrics import (
    DiscrepancyMatrix,
    accuracy,
    export_embeddings,
    intra_class_discrepancy,
)
from .model import (
    LatentBatch,
    LatentSplitModel,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .priors import ClassPrior, fit_class_priors, load_priors, prior_log_density, save_priors
from .trainer import EbConfig, TrainConfig, TrainReport, estimate_sigma, train

__version__ = "0.1.0"
