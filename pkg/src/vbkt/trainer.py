"""Deterministic mini-batch SGD for every adaptation method, plus the
variance-estimation procedure driven by augmented data.

All randomness (shuffling, latent sampling) is derived from the run seed
through counter-based keys, so identical configs give bit-identical weights
and loss histories; wall-clock is the one report field that varies.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tape
from .data import DomainDataset, augment
from .losses import GmfConfig, RelationConfig, TslConfig
from .metrics import accuracy
from .model import LatentSplitModel

METHODS = ("no_transfer", "one_hot", "tsl", "vbkt_gmf", "vbkt_eb")


@dataclass
class EbConfig:
    """Empirical-Bayes knobs: KL weight and an optional sampling-variance
    override used by the degenerate-config reductions (by default the
    sampling variance is the class prior's MLE variance).  The override may
    be a scalar or a (num_classes, M) array indexed by label."""

    kl_weight: float = 1.0
    sampling_sigma2: float | np.ndarray | None = None

    def validate(self) -> None:
        if self.kl_weight < 0.0:
            raise ValueError("EbConfig.kl_weight must be nonnegative")
        if self.sampling_sigma2 is not None and np.any(
                np.asarray(self.sampling_sigma2) <= 0.0):
            raise ValueError("EbConfig.sampling_sigma2 must be positive")


@dataclass
class TrainConfig:
    method: str = "one_hot"
    use_relational: bool = False
    combine_tsl: bool = False
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    gmf: GmfConfig = field(default_factory=GmfConfig)
    eb: EbConfig = field(default_factory=EbConfig)
    relation: RelationConfig = field(default_factory=RelationConfig)
    tsl: TslConfig = field(default_factory=TslConfig)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        self.gmf.validate()
        self.eb.validate()
        self.relation.validate()
        self.tsl.validate()


@dataclass
class TrainReport:
    method: str
    seed: int
    epoch_losses: list        # one dict of mean LossBreakdown terms per epoch
    final_accuracy: float
    wall_clock: float         # seconds; excluded from reproducibility checks

    def as_dict(self) -> dict:
        return {"method": self.method, "seed": self.seed,
                "epoch_losses": self.epoch_losses,
                "final_accuracy": self.final_accuracy,
                "wall_clock": self.wall_clock}


def estimate_sigma(source_model: LatentSplitModel, data: DomainDataset,
                   n_aug: int, strength: float, seed: int,
                   variance_floor: float = 1e-6,
                   per_dimension: bool = False):
    """Latent-variance estimate from augmented copies of each sample.

    Each sample gets n_aug jittered copies; the per-dimension standard
    deviation of their embeddings is averaged over samples and squared.
    Scalar mode additionally averages the standard deviation over the
    latent dimensions before squaring.
    """
    if n_aug < 2:
        raise ValueError("n_aug must be at least 2")
    copies = augment(data.x, n_aug, strength, seed)
    stacked = np.stack([source_model.inference_latent(c) for c in copies])
    std_per_sample = stacked.std(axis=0)          # (N, M), population std
    mean_std = std_per_sample.mean(axis=0)        # (M,)
    if per_dimension:
        return np.maximum(mean_std ** 2, variance_floor)
    return float(max(float(mean_std.mean()) ** 2, variance_floor))


def _check_prerequisites(cfg: TrainConfig, data: DomainDataset,
                         source_model, source_data, prior) -> None:
    needs_teacher = cfg.method == "tsl" or cfg.combine_tsl
    if cfg.method == "vbkt_gmf":
        if data.pair_index is None:
            raise ValueError("vbkt_gmf requires parallel data (missing pair index)")
        if source_model is None or source_data is None:
            raise ValueError("vbkt_gmf requires the frozen source model and data")
    if cfg.method == "vbkt_eb" and prior is None:
        raise ValueError("vbkt_eb requires a fitted ClassPrior")
    if needs_teacher and source_model is None:
        raise ValueError("distillation requires the frozen source model")


def train(model_init: LatentSplitModel, data: DomainDataset, cfg: TrainConfig,
          eval_data: DomainDataset | None = None,
          source_model: LatentSplitModel | None = None,
          source_data: DomainDataset | None = None,
          prior=None) -> tuple[LatentSplitModel, TrainReport]:
    """Run epochs * ceil(N/batch) SGD steps on the method's objective.

    `model_init` is consumed as the starting point (callers pass a copy of
    the source model for adaptation methods, a fresh-random model for
    no_transfer).  The source model only ever serves frozen forward passes.
    """
    cfg.validate()
    _check_prerequisites(cfg, data, source_model, source_data, prior)
    start = time.perf_counter()

    model = model_init
    n = len(data)
    needs_teacher = cfg.method == "tsl" or cfg.combine_tsl

    source_mu_all = None
    if cfg.method == "vbkt_gmf":
        source_mu_all = source_model.inference_latent(source_data.x[data.pair_index])
    teacher_logits_all = None
    if needs_teacher:
        # With parallel data the teacher scores the paired source sample
        # (its own domain, where it is reliable); otherwise it has to see
        # the target input directly.
        if data.pair_index is not None and source_data is not None:
            teacher_logits_all = source_model.inference_logits(
                source_data.x[data.pair_index])
        else:
            teacher_logits_all = source_model.inference_logits(data.x)

    relation = cfg.relation if cfg.use_relational else None
    tsl_cfg = cfg.tsl if needs_teacher else None
    lr = cfg.learning_rate
    params = model.parameters()
    epoch_losses = []
    step = 0

    for epoch in range(cfg.epochs):
        order = ad.counter_rng(cfg.seed, step=epoch, stream=29).permutation(n)
        sums: dict[str, float] = {}
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            rows = order[lo:lo + cfg.batch_size]
            step += 1
            x_b, y_b = data.x[rows], data.y[rows]
            with Tape(seed=cfg.seed, step=step):
                breakdown = _step_loss(
                    model, cfg, x_b, y_b, rows,
                    source_mu_all, teacher_logits_all, relation, tsl_cfg, prior)
            model.reset_grads()
            ad.backward(breakdown.total_tensor)
            if lr != 0.0:
                updated = []
                for p in params:
                    if p.grad is not None:
                        p_new = ad.Tensor(p.values - lr * p.grad, requires_grad=True)
                    else:
                        p_new = p
                    updated.append(p_new)
                _rebind(model, updated)
                params = model.parameters()
            for key, value in breakdown.as_dict().items():
                sums[key] = sums.get(key, 0.0) + value
            n_batches += 1
        epoch_losses.append({k: v / n_batches for k, v in sums.items()})

    final_accuracy = accuracy(model, eval_data) if eval_data is not None else float("nan")
    report = TrainReport(method=_method_label(cfg), seed=cfg.seed,
                         epoch_losses=epoch_losses,
                         final_accuracy=final_accuracy,
                         wall_clock=time.perf_counter() - start)
    return model, report


def _method_label(cfg: TrainConfig) -> str:
    label = cfg.method
    if cfg.use_relational:
        label += "_rela"
    if cfg.combine_tsl:
        label += "_tsl"
    return label


def _rebind(model: LatentSplitModel, updated: list) -> None:
    it = iter(updated)
    model.theta_layers = [(next(it), next(it)) for _ in model.theta_layers]
    model.omega_layers = [(next(it), next(it)) for _ in model.omega_layers]


def _step_loss(model, cfg: TrainConfig, x_b, y_b, rows,
               source_mu_all, teacher_logits_all, relation, tsl_cfg, prior):
    teacher_b = teacher_logits_all[rows] if teacher_logits_all is not None else None

    if cfg.method in ("no_transfer", "one_hot", "tsl"):
        logits = model.forward_logits(model.forward_latent(x_b))
        nll = losses.cross_entropy(logits, y_b)
        tsl_t, w = None, 0.0
        if cfg.method == "tsl" or cfg.combine_tsl:
            tsl_t = losses.tsl_loss(logits, teacher_b, tsl_cfg)
            w = tsl_cfg.weight
        return losses._assemble(nll, None, 0.0, None, 0.0, tsl_t, w)

    if cfg.method == "vbkt_gmf":
        return losses.gmf_elbo_loss(
            model, x_b, y_b, source_mu_all[rows],
            cfg.gmf, relation=relation, tsl=tsl_cfg, teacher_logits=teacher_b)

    # vbkt_eb
    return losses.eb_elbo_loss(
        model, x_b, y_b, prior,
        kl_weight=cfg.eb.kl_weight,
        sampling_sigma2=cfg.eb.sampling_sigma2,
        relation=relation, tsl=tsl_cfg, teacher_logits=teacher_b)
