"""Evaluation: accuracy, intra-class output discrepancy, embedding export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import counter_rng
from .data import DomainDataset


def accuracy(model, dataset: DomainDataset) -> float:
    """Fraction of argmax-correct predictions (ties go to the lowest class)."""
    if len(dataset) == 0:
        raise ValueError("cannot score an empty dataset")
    logits = model.inference_logits(dataset.x)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.y))


@dataclass
class DiscrepancyMatrix:
    """Pairwise L2 distances between pre-softmax outputs of same-class samples."""

    class_id: int
    sample_ids: np.ndarray
    d: np.ndarray

    def mean_off_diagonal(self) -> float:
        n = self.d.shape[0]
        if n < 2:
            return 0.0
        return float((self.d.sum() - np.trace(self.d)) / (n * (n - 1)))


def intra_class_discrepancy(model, dataset: DomainDataset, class_id: int,
                            n_samples: int = 30, seed: int = 0) -> DiscrepancyMatrix:
    """Distance matrix over a seeded selection of one class's samples."""
    members = np.flatnonzero(dataset.y == class_id)
    if members.shape[0] < n_samples:
        raise ValueError(
            f"class {class_id} has {members.shape[0]} samples, need {n_samples}")
    rng = counter_rng(seed, stream=31)
    chosen = np.sort(rng.choice(members, size=n_samples, replace=False))
    logits = model.inference_logits(dataset.x[chosen])
    diff = logits[:, None, :] - logits[None, :, :]
    d = np.sqrt((diff ** 2).sum(axis=2))
    return DiscrepancyMatrix(class_id=class_id, sample_ids=chosen, d=d)


def discrepancy_csv_lines(matrix: DiscrepancyMatrix) -> list[str]:
    header = "sample_id," + ",".join(str(int(s)) for s in matrix.sample_ids)
    lines = [header]
    for i, sid in enumerate(matrix.sample_ids):
        lines.append(str(int(sid)) + "," +
                     ",".join(repr(v) for v in matrix.d[i].tolist()))
    return lines


def save_discrepancy(matrix: DiscrepancyMatrix, path) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(discrepancy_csv_lines(matrix)) + "\n")


def export_embeddings(model, datasets: list[DomainDataset], path) -> int:
    """One row per sample: domain_id, label, then the latent coordinates.

    Returns the number of data rows written.
    """
    m = model.config.latent_dim
    header = "domain_id,label," + ",".join(f"e{j}" for j in range(m))
    lines = [header]
    for ds in datasets:
        z = model.inference_latent(ds.x) if len(ds) else np.zeros((0, m))
        for i in range(len(ds)):
            lines.append(f"{ds.domain_id},{int(ds.y[i])}," +
                         ",".join(repr(v) for v in z[i].tolist()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(lines) - 1
