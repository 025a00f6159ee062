"""Synthetic domain-shift benchmark: Gaussian class clusters plus a
configurable shift standing in for a device change (invertible affine map
of the feature channels) or an environment change (additive noise at one
of several levels).

Parallel targets are shifted copies of selected source rows with the
pairing recorded; non-parallel targets are fresh draws from the source
generator, then shifted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import counter_rng


@dataclass
class DomainDataset:
    x: np.ndarray                      # (N, input_dim)
    y: np.ndarray                      # (N,) labels in [0, C)
    num_classes: int
    domain_id: str
    pair_index: np.ndarray | None = None   # per-row index into the sister dataset
    class_means: np.ndarray | None = None  # generator metadata, not serialized
    within_std: float | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("feature and label counts differ")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]


@dataclass
class ShiftSpec:
    """Domain shift: 'affine_channel' (device analogue, invertible) or
    'additive_noise' (environment analogue, per-sample level from a list)."""

    kind: str = "affine_channel"
    strength: float = 1.0
    noise_levels: tuple = (0.5, 0.75, 1.0, 1.25, 1.5)
    seed: int = 7
    matrix: np.ndarray | None = field(default=None, repr=False)
    bias: np.ndarray | None = field(default=None, repr=False)

    def validate(self) -> None:
        if self.kind not in ("affine_channel", "additive_noise"):
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if self.kind == "additive_noise":
            if len(self.noise_levels) == 0 or any(v <= 0 for v in self.noise_levels):
                raise ValueError("noise levels must be positive")
        if self.strength < 0.0:
            raise ValueError("shift strength must be nonnegative")


def _affine_params(spec: ShiftSpec, input_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Invertible channel transform: random rotation blended toward the
    identity by strength, per-channel gains exp(strength*g), and a bias."""
    if spec.matrix is not None:
        return spec.matrix, spec.bias if spec.bias is not None else np.zeros(input_dim)
    t = float(spec.strength)
    if t == 0.0:
        return np.eye(input_dim), np.zeros(input_dim)
    rng = counter_rng(spec.seed, stream=11)
    # Rotation by angle t*pi/4 in input_dim//2 random orthogonal planes.
    q, _ = np.linalg.qr(rng.normal(size=(input_dim, input_dim)))
    rot = np.eye(input_dim)
    angle = t * np.pi / 4.0
    c, s = np.cos(angle), np.sin(angle)
    for k in range(0, input_dim - 1, 2):
        block = np.eye(input_dim)
        block[k, k] = c
        block[k + 1, k + 1] = c
        block[k, k + 1] = -s
        block[k + 1, k] = s
        rot = rot @ block
    matrix = q @ rot @ q.T @ np.diag(np.exp(t * 0.2 * rng.normal(size=input_dim)))
    bias = t * 0.5 * rng.normal(size=input_dim)
    return matrix, bias


def apply_shift(spec: ShiftSpec, x: np.ndarray, sample_seed: int = 0) -> np.ndarray:
    """Transform rows of x according to the shift; deterministic per call."""
    spec.validate()
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "affine_channel":
        matrix, bias = _affine_params(spec, x.shape[1])
        return x @ matrix.T + bias
    rng = counter_rng(spec.seed, step=sample_seed, stream=13)
    levels = np.asarray(spec.noise_levels, dtype=np.float64)
    chosen = levels[rng.integers(0, levels.shape[0], size=x.shape[0])]
    noise = rng.normal(size=x.shape) * np.sqrt(chosen)[:, None]
    return x + noise


def invert_shift(spec: ShiftSpec, x: np.ndarray) -> np.ndarray:
    """Undo an affine channel shift (noise shifts are not invertible)."""
    if spec.kind != "affine_channel":
        raise ValueError("only affine_channel shifts are invertible")
    matrix, bias = _affine_params(spec, x.shape[1])
    return np.linalg.solve(matrix, (x - bias).T).T


def generate_source(n_samples: int, n_classes: int, input_dim: int, seed: int,
                    separation: float = 3.0, within_std: float = 1.0,
                    domain_id: str = "source") -> DomainDataset:
    """Balanced Gaussian class clusters with controlled separation.

    Class means sit at separation * unit directions; per-class counts are
    balanced within one sample; all randomness is keyed by the seed.
    """
    if n_samples < 2 * n_classes:
        raise ValueError("need at least two samples per class")
    rng = counter_rng(seed, stream=17)
    directions = rng.normal(size=(n_classes, input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions

    base, extra = divmod(n_samples, n_classes)
    counts = np.full(n_classes, base, dtype=np.int64)
    counts[:extra] += 1
    y = np.repeat(np.arange(n_classes), counts)
    x = means[y] + within_std * rng.normal(size=(n_samples, input_dim))
    order = rng.permutation(n_samples)
    return DomainDataset(x=x[order], y=y[order], num_classes=n_classes,
                         domain_id=domain_id, class_means=means,
                         within_std=within_std)


def derive_target(source: DomainDataset, spec: ShiftSpec, n_target: int,
                  parallel: bool, seed: int = 0, domain_id: str = "target",
                  exclude_indices=None, max_fraction: float = 0.1) -> DomainDataset:
    """Shifted target dataset, paired with source rows or freshly drawn.

    parallel=True copies a balanced seeded selection of source rows, applies
    the shift, and records the pairing (total and label-preserving).
    parallel=False redraws from the source generator metadata and shifts; no
    pairing exists.  By default n_target may not exceed a tenth of the
    source size; pass a larger max_fraction to override.
    """
    spec.validate()
    if n_target > max_fraction * len(source):
        raise ValueError(
            f"n_target={n_target} exceeds {max_fraction:.0%} of the source size")
    rng = counter_rng(seed, stream=19)

    if parallel:
        available = np.ones(len(source), dtype=bool)
        if exclude_indices is not None:
            available[np.asarray(exclude_indices, dtype=np.int64)] = False
        pool = np.flatnonzero(available)
        if pool.shape[0] < n_target:
            raise ValueError("not enough source rows left to pair against")
        # Balanced pick: round-robin over classes in seeded order.
        picked = []
        by_class = [rng.permutation(pool[source.y[pool] == c])
                    for c in range(source.num_classes)]
        depth = 0
        while len(picked) < n_target:
            progressed = False
            for rows in by_class:
                if depth < rows.shape[0] and len(picked) < n_target:
                    picked.append(rows[depth])
                    progressed = True
            if not progressed:
                raise ValueError("source classes exhausted while pairing")
            depth += 1
        pair = np.array(picked, dtype=np.int64)
        x = apply_shift(spec, source.x[pair], sample_seed=seed)
        return DomainDataset(x=x, y=source.y[pair].copy(),
                             num_classes=source.num_classes, domain_id=domain_id,
                             pair_index=pair, class_means=source.class_means,
                             within_std=source.within_std)

    if source.class_means is None:
        raise ValueError("non-parallel targets need a source with generator metadata")
    fresh = generate_source(n_target, source.num_classes, source.input_dim,
                            seed=seed ^ 0x51AB, separation=1.0,
                            within_std=source.within_std, domain_id=domain_id)
    # Re-center the unit-separation draw on the true class means.
    x = source.class_means[fresh.y] + (fresh.x - fresh.class_means[fresh.y])
    x = apply_shift(spec, x, sample_seed=seed)
    return DomainDataset(x=x, y=fresh.y, num_classes=source.num_classes,
                         domain_id=domain_id, class_means=source.class_means,
                         within_std=source.within_std)


def sample_source_like(source: DomainDataset, n: int, seed: int,
                       domain_id: str = "source_test") -> DomainDataset:
    """Fresh unshifted draws from the source generator (for held-out eval)."""
    if source.class_means is None:
        raise ValueError("dataset carries no generator metadata")
    fresh = generate_source(n, source.num_classes, source.input_dim,
                            seed=seed ^ 0xC0FE, separation=1.0,
                            within_std=source.within_std, domain_id=domain_id)
    x = source.class_means[fresh.y] + (fresh.x - fresh.class_means[fresh.y])
    return DomainDataset(x=x, y=fresh.y, num_classes=source.num_classes,
                         domain_id=domain_id, class_means=source.class_means,
                         within_std=source.within_std)


def augment(x: np.ndarray, n_aug: int, strength: float, seed: int) -> list[np.ndarray]:
    """n_aug jittered copies of x (Gaussian input perturbation of given std)."""
    if n_aug < 2:
        raise ValueError("n_aug must be at least 2")
    x = np.asarray(x, dtype=np.float64)
    rng = counter_rng(seed, stream=23)
    return [x + strength * rng.normal(size=x.shape) for _ in range(n_aug)]


# ---- delimited-text persistence -----------------------------------------------
#
# header line: N,input_dim,num_classes,domain_id,paired(0/1)
# data rows:   label[,pair_index],feature values as decimal strings

def save_dataset(ds: DomainDataset, path) -> None:
    paired = ds.pair_index is not None
    lines = [f"{len(ds)},{ds.input_dim},{ds.num_classes},{ds.domain_id},{int(paired)}"]
    for i in range(len(ds)):
        cells = [str(int(ds.y[i]))]
        if paired:
            cells.append(str(int(ds.pair_index[i])))
        cells.extend(repr(v) for v in ds.x[i].tolist())
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> DomainDataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        n, input_dim, num_classes = int(header[0]), int(header[1]), int(header[2])
        domain_id, paired = header[3], bool(int(header[4]))
        x = np.empty((n, input_dim), dtype=np.float64)
        y = np.empty(n, dtype=np.int64)
        pair = np.empty(n, dtype=np.int64) if paired else None
        for i in range(n):
            cells = fh.readline().strip().split(",")
            y[i] = int(cells[0])
            offset = 1
            if paired:
                pair[i] = int(cells[1])
                offset = 2
            x[i] = [float(c) for c in cells[offset:]]
    return DomainDataset(x=x, y=y, num_classes=num_classes,
                         domain_id=domain_id, pair_index=pair)
