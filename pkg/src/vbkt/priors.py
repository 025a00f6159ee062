"""Class-conditional diagonal Gaussian priors fitted on source latent means.

Per class: the biased (1/N) mean and elementwise variance of the frozen
source model's latent embeddings, with variances clamped below so the
downstream KL never divides by a collapsed dimension.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class ClassPrior:
    mu: np.ndarray        # (C, M) class means
    sigma2: np.ndarray    # (C, M) floored class variances
    count: np.ndarray     # (C,) observations per class

    @property
    def num_classes(self) -> int:
        return self.mu.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[1]


def fit_class_priors(source_model, source_data, variance_floor: float = 1e-6) -> ClassPrior:
    """MLE mean/variance of source embeddings per class, variance floored.

    The source model runs in inference mode (z = mu).  Every class in
    [0, C) must appear at least twice.
    """
    if variance_floor <= 0.0:
        raise ValueError("variance_floor must be positive")
    x, y = source_data.x, source_data.y
    if x.shape[0] == 0:
        raise ValueError("cannot fit priors on an empty dataset")
    num_classes = source_model.config.num_classes
    z = source_model.inference_latent(x)
    m = z.shape[1]

    mu = np.zeros((num_classes, m), dtype=np.float64)
    sigma2 = np.zeros((num_classes, m), dtype=np.float64)
    count = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        members = z[y == c]
        if members.shape[0] < 2:
            raise ValueError(f"class {c} has fewer than 2 source samples")
        count[c] = members.shape[0]
        mu[c] = members.mean(axis=0)
        sigma2[c] = np.maximum(((members - mu[c]) ** 2).mean(axis=0), variance_floor)
    return ClassPrior(mu=mu, sigma2=sigma2, count=count)


def prior_log_density(prior: ClassPrior, c: int, z) -> float:
    """Exact log density of z under class c's diagonal Gaussian."""
    if not 0 <= c < prior.num_classes:
        raise ValueError(f"unknown class {c}")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    mu, s2 = prior.mu[c], prior.sigma2[c]
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * s2) + (z - mu) ** 2 / s2))


def priors_document(prior: ClassPrior) -> dict:
    """Serialize in the checkpoint layout: per-class named decimal arrays."""
    layers = []
    for c in range(prior.num_classes):
        layers.append({"name": f"class.{c}.mu", "shape": [prior.latent_dim],
                       "values": [repr(v) for v in prior.mu[c].tolist()]})
        layers.append({"name": f"class.{c}.sigma2", "shape": [prior.latent_dim],
                       "values": [repr(v) for v in prior.sigma2[c].tolist()]})
    return {
        "meta": {"num_classes": prior.num_classes, "latent_dim": prior.latent_dim,
                 "count": prior.count.tolist()},
        "layers": layers,
    }


def save_priors(prior: ClassPrior, path) -> None:
    with open(path, "w") as fh:
        json.dump(priors_document(prior), fh, indent=1)
        fh.write("\n")


def load_priors(path) -> ClassPrior:
    with open(path) as fh:
        doc = json.load(fh)
    meta = doc["meta"]
    c, m = meta["num_classes"], meta["latent_dim"]
    arrays = {layer["name"]: np.array([float(s) for s in layer["values"]],
                                      dtype=np.float64)
              for layer in doc["layers"]}
    mu = np.stack([arrays[f"class.{i}.mu"] for i in range(c)])
    sigma2 = np.stack([arrays[f"class.{i}.sigma2"] for i in range(c)])
    return ClassPrior(mu=mu, sigma2=sigma2,
                      count=np.array(meta["count"], dtype=np.int64))
