"""Latent-split classifier: input -> theta network -> latent mean -> omega network.

The latent layer is the pre-activation output of the last theta affine
layer; during training a Gaussian sample z = mu + sigma*eps flows through
omega, at inference z is mu exactly.  Which layer acts as the latent is a
pure configuration choice (move widths between theta_widths and
omega_widths), which is what the depth-ablation harness relies on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class ModelConfig:
    input_dim: int
    num_classes: int
    theta_widths: tuple = (64, 64)
    latent_dim: int = 32
    omega_widths: tuple = ()

    def __post_init__(self):
        self.theta_widths = tuple(int(w) for w in self.theta_widths)
        self.omega_widths = tuple(int(w) for w in self.omega_widths)
        if self.input_dim < 1 or self.num_classes < 2 or self.latent_dim < 1:
            raise ValueError("invalid model dimensions")


@dataclass
class LatentBatch:
    """Per-sample latent Gaussians for one forward pass.

    In inference mode z is mu exactly; sigma2 entries are strictly positive
    whenever sampling is in play.
    """

    mu: Tensor
    sigma2: float | np.ndarray
    z: Tensor


class LatentSplitModel:
    """MLP classifier factored into weights before and after the latent layer."""

    def __init__(self, config: ModelConfig, seed: int = 0, _init_weights: bool = True):
        self.config = config
        self.theta_layers: list[tuple[Tensor, Tensor]] = []
        self.omega_layers: list[tuple[Tensor, Tensor]] = []
        if _init_weights:
            self._init(seed)

    def _init(self, seed: int) -> None:
        rng = ad.counter_rng(seed, stream=101)
        dims = [self.config.input_dim, *self.config.theta_widths, self.config.latent_dim]
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.theta_layers.append((Tensor(w, requires_grad=True),
                                      Tensor(np.zeros(fan_out), requires_grad=True)))
        dims = [self.config.latent_dim, *self.config.omega_widths, self.config.num_classes]
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.omega_layers.append((Tensor(w, requires_grad=True),
                                      Tensor(np.zeros(fan_out), requires_grad=True)))

    # ---- parameter access -------------------------------------------------

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in self.theta_layers + self.omega_layers:
            out.extend((w, b))
        return out

    def theta_parameters(self) -> list[Tensor]:
        return [t for pair in self.theta_layers for t in pair]

    def omega_parameters(self) -> list[Tensor]:
        return [t for pair in self.omega_layers for t in pair]

    def reset_grads(self) -> None:
        for p in self.parameters():
            p.grad = None

    def copy(self) -> "LatentSplitModel":
        dup = LatentSplitModel(self.config, _init_weights=False)
        dup.theta_layers = [(Tensor(w.values.copy(), requires_grad=True),
                             Tensor(b.values.copy(), requires_grad=True))
                            for w, b in self.theta_layers]
        dup.omega_layers = [(Tensor(w.values.copy(), requires_grad=True),
                             Tensor(b.values.copy(), requires_grad=True))
                            for w, b in self.omega_layers]
        return dup

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.values.tobytes())
        return h.hexdigest()

    # ---- forward paths ----------------------------------------------------

    def forward_latent(self, x) -> Tensor:
        """Latent means mu for a (batch, input_dim) input; grads reach theta."""
        h = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
        if h.values.ndim != 2 or h.values.shape[1] != self.config.input_dim:
            raise ValueError(
                f"expected input of shape (batch, {self.config.input_dim}), got {h.shape}")
        last = len(self.theta_layers) - 1
        for i, (w, b) in enumerate(self.theta_layers):
            h = ad.add(ad.matmul(h, w), b)
            if i != last:
                h = ad.relu(h)
        return h

    def forward_logits(self, z) -> Tensor:
        """Class logits from latent values; grads reach omega and z."""
        h = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z))
        if h.values.ndim != 2 or h.values.shape[1] != self.config.latent_dim:
            raise ValueError(
                f"expected latent of shape (batch, {self.config.latent_dim}), got {h.shape}")
        last = len(self.omega_layers) - 1
        for i, (w, b) in enumerate(self.omega_layers):
            h = ad.add(ad.matmul(h, w), b)
            if i != last:
                h = ad.relu(h)
        return h

    def forward_train(self, x, sigma2, seed: int | None = None) -> tuple[LatentBatch, Tensor]:
        """Sampled forward pass: z ~ N(mu, sigma2) via the reparameterization.

        sigma2 is a positive variance: scalar, per-dimension vector, or a
        (batch, M) array.  Noise is keyed by the active tape unless an
        explicit seed is given.
        """
        s2 = np.asarray(sigma2, dtype=np.float64)
        if np.any(s2 <= 0.0):
            raise ValueError("forward_train requires strictly positive sigma2")
        mu = self.forward_latent(x)
        sigma = np.sqrt(s2) if s2.shape else float(np.sqrt(s2))
        z = ad.sample_gaussian(mu, sigma, seed=seed)
        logits = self.forward_logits(z)
        return LatentBatch(mu=mu, sigma2=sigma2, z=z), logits

    def inference_logits(self, x: np.ndarray) -> np.ndarray:
        """Deterministic logits with z = mu; plain arrays, no graph recording."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        last = len(self.theta_layers) - 1
        for i, (w, b) in enumerate(self.theta_layers):
            h = h @ w.values + b.values
            if i != last:
                h = np.maximum(h, 0.0)
        last = len(self.omega_layers) - 1
        for i, (w, b) in enumerate(self.omega_layers):
            h = h @ w.values + b.values
            if i != last:
                h = np.maximum(h, 0.0)
        return h

    def inference_latent(self, x: np.ndarray) -> np.ndarray:
        """Deterministic latent means as a plain array."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        last = len(self.theta_layers) - 1
        for i, (w, b) in enumerate(self.theta_layers):
            h = h @ w.values + b.values
            if i != last:
                h = np.maximum(h, 0.0)
        return h


# ---- checkpoint format ------------------------------------------------------
#
# A checkpoint is a JSON document: a `meta` block with the architecture and a
# `layers` list of {name, shape, values}, values as decimal strings (repr) so
# load/save round-trips are value-exact.

def _named_layers(model: LatentSplitModel):
    for i, (w, b) in enumerate(model.theta_layers):
        yield f"theta.{i}.weight", w
        yield f"theta.{i}.bias", b
    for i, (w, b) in enumerate(model.omega_layers):
        yield f"omega.{i}.weight", w
        yield f"omega.{i}.bias", b


def checkpoint_document(model: LatentSplitModel) -> dict:
    layers = []
    for name, tensor in _named_layers(model):
        layers.append({
            "name": name,
            "shape": list(tensor.values.shape),
            "values": [repr(v) for v in tensor.values.reshape(-1).tolist()],
        })
    cfg = model.config
    return {
        "meta": {
            "input_dim": cfg.input_dim,
            "num_classes": cfg.num_classes,
            "theta_widths": list(cfg.theta_widths),
            "latent_dim": cfg.latent_dim,
            "omega_widths": list(cfg.omega_widths),
        },
        "layers": layers,
    }


def save_checkpoint(model: LatentSplitModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_document(model), fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> LatentSplitModel:
    with open(path) as fh:
        doc = json.load(fh)
    meta = doc["meta"]
    cfg = ModelConfig(
        input_dim=meta["input_dim"],
        num_classes=meta["num_classes"],
        theta_widths=tuple(meta["theta_widths"]),
        latent_dim=meta["latent_dim"],
        omega_widths=tuple(meta["omega_widths"]),
    )
    model = LatentSplitModel(cfg, _init_weights=False)
    arrays = {}
    for layer in doc["layers"]:
        vals = np.array([float(s) for s in layer["values"]], dtype=np.float64)
        arrays[layer["name"]] = vals.reshape(layer["shape"])
    n_theta = len(cfg.theta_widths) + 1
    n_omega = len(cfg.omega_widths) + 1
    model.theta_layers = [
        (Tensor(arrays[f"theta.{i}.weight"], requires_grad=True),
         Tensor(arrays[f"theta.{i}.bias"], requires_grad=True))
        for i in range(n_theta)
    ]
    model.omega_layers = [
        (Tensor(arrays[f"omega.{i}.weight"], requires_grad=True),
         Tensor(arrays[f"omega.{i}.bias"], requires_grad=True))
        for i in range(n_omega)
    ]
    return model
