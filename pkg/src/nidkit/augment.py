"""View-generating augmentations for joint-embedding training.

All six strategies operate on post-preprocessing feature vectors (one-hot
columns are treated as ordinary features). Each function is pure given its
``numpy.random.Generator``; batches are augmented row-independently with
per-element masks.

Five kinds act in input space; ``mixup`` is special — it mixes encoder
*outputs*, so the trainer applies it after the encoder rather than here on
raw rows. ``subsets`` is also special in that its views are feature slices,
carrying their column lists, and the same slicing must be reused at test
time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import SchemaError
from .nn import BatchSizeError, ConfigError

KINDS = ("swap_noise", "zero_out", "gaussian_noise", "random_shuffle",
         "subsets", "mixup")
INPUT_SPACE_KINDS = ("swap_noise", "zero_out", "gaussian_noise", "random_shuffle")


@dataclass
class AugmentationSpec:
    """Validated bundle of augmentation hyperparameters.

    Only the fields relevant to ``kind`` are consulted: p for the three
    masked corruptions, (mu, sigma2) for gaussian_noise, (k, overlap_fraction)
    for subsets, alpha for mixup.
    """

    kind: str
    p: float = 0.15
    mu: float = 0.0
    sigma2: float = 0.01
    k: int = 2
    overlap_fraction: float = 0.0
    alpha: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown augmentation kind {self.kind!r}")
        if self.kind in ("swap_noise", "zero_out", "gaussian_noise"):
            if not 0.0 <= self.p <= 1.0:
                raise ConfigError(f"{self.kind}: p={self.p} outside [0, 1]")
        if self.kind == "gaussian_noise" and self.sigma2 <= 0.0:
            raise ConfigError(f"gaussian_noise: sigma2={self.sigma2} must be > 0")
        if self.kind == "subsets":
            if self.k < 2:
                raise ConfigError(f"subsets: k={self.k} must be >= 2")
            if not 0.0 <= self.overlap_fraction < 1.0:
                raise ConfigError(
                    f"subsets: overlap_fraction={self.overlap_fraction} outside [0, 1)")
        if self.kind == "mixup" and not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"mixup: alpha={self.alpha} outside [0, 1]")


@dataclass
class ViewSet:
    """Views produced from one source batch.

    ``views`` holds >= 2 arrays. For subsets, ``columns[i]`` lists the source
    feature indices of view i (views may differ in meaning but share width);
    otherwise ``columns`` is None. ``representation_space`` marks view sets
    that must be built after the encoder (mixup).
    """

    views: list
    columns: Optional[list] = None
    representation_space: bool = False


# ---------------------------------------------------------------------------
# Input-space corruptions


def swap_noise(batch: np.ndarray, p: float, donor_pool: np.ndarray,
               rng: np.random.Generator) -> np.ndarray:
    """Replace each element, w.p. p, by the same-position value of a random
    donor row (donors drawn from the training pool only)."""
    batch = np.asarray(batch)
    donor_pool = np.asarray(donor_pool)
    if donor_pool.ndim != 2 or donor_pool.shape[1] != batch.shape[1]:
        raise SchemaError(
            f"swap_noise: donor pool width {donor_pool.shape} does not match batch {batch.shape}")
    mask = rng.random(batch.shape) < p
    donor_rows = rng.integers(0, donor_pool.shape[0], size=batch.shape)
    donors = donor_pool[donor_rows, np.arange(batch.shape[1])[None, :]]
    return np.where(mask, donors, batch)


def zero_out(batch: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Set each element to zero with probability p."""
    batch = np.asarray(batch)
    mask = rng.random(batch.shape) < p
    return np.where(mask, 0.0, batch)


def gaussian_noise(batch: np.ndarray, p: float, mu: float, sigma2: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Add N(mu, sigma2) noise to each element with probability p."""
    batch = np.asarray(batch)
    mask = rng.random(batch.shape) < p
    noise = rng.normal(loc=mu, scale=np.sqrt(sigma2), size=batch.shape)
    return batch + noise * mask


def random_shuffle(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permute feature positions within each row, Fisher-Yates style.

    Iterates k = d-1 .. 1 drawing a uniform swap position in [0, k] (the
    k = 0 step is a no-op and skipped); every row uses its own independent
    draws.
    """
    batch = np.asarray(batch)
    single = batch.ndim == 1
    out = np.atleast_2d(batch).copy()
    b, d = out.shape
    rows = np.arange(b)
    for k in range(d - 1, 0, -1):
        swap = rng.integers(0, k + 1, size=b)  # inclusive upper bound k
        tmp = out[rows, k].copy()
        out[rows, k] = out[rows, swap]
        out[rows, swap] = tmp
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Subsets


def subset_columns(d: int, k: int, overlap_fraction: float,
                   feature_permutation: np.ndarray) -> list:
    """Column index lists for k equal-width windows over a permuted order.

    Base block width is ceil(d/k); each window is widened by
    round(overlap_fraction * width) columns shared with its right neighbor,
    and window starts are spaced evenly so the last window ends at d. All
    windows have equal width (a shared encoder consumes every view), and
    their union covers all d features.
    """
    if k < 2:
        raise ConfigError(f"subsets: k={k} must be >= 2")
    if k > d:
        raise ConfigError(f"subsets: k={k} exceeds feature count {d}")
    perm = np.asarray(feature_permutation)
    if perm.shape != (d,) or sorted(perm.tolist()) != list(range(d)):
        raise ConfigError("subsets: feature_permutation must permute range(d)")
    base = int(np.ceil(d / k))
    width = base + int(round(overlap_fraction * base))
    width = min(width, d)
    cols = []
    for i in range(k):
        start = int(round(i * (d - width) / (k - 1))) if k > 1 else 0
        cols.append(perm[start:start + width].tolist())
    covered = set()
    for c in cols:
        covered.update(c)
    assert covered == set(range(d)), "subset windows failed to cover all features"
    return cols


def make_subsets(batch: np.ndarray, k: int, overlap_fraction: float,
                 feature_permutation: np.ndarray) -> ViewSet:
    """Slice a batch into k overlapping feature-subset views."""
    batch = np.asarray(batch)
    cols = subset_columns(batch.shape[1], k, overlap_fraction, feature_permutation)
    return ViewSet(views=[batch[:, c] for c in cols], columns=cols)


# ---------------------------------------------------------------------------
# Mixup (representation space)


def mixup_partners(b: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct partner index for every row: uniform over {0..b-1} \\ {i}."""
    if b < 2:
        raise BatchSizeError("mixup: need at least two rows")
    partners = rng.integers(0, b - 1, size=b)
    partners[partners >= np.arange(b)] += 1
    return partners


def mixup(representations: np.ndarray, alpha: float,
          rng: np.random.Generator) -> np.ndarray:
    """Convex-combine each row with a distinct random partner row.

    out_i = alpha * y_i + (1 - alpha) * y_j  with j != i drawn uniformly.
    Operates on encoder outputs; the two views of a pair should call this
    with independent generator states so their partners differ.
    """
    y = np.asarray(representations)
    partners = mixup_partners(y.shape[0], rng)
    return alpha * y + (1.0 - alpha) * y[partners]


# ---------------------------------------------------------------------------
# Dispatcher


def make_views(batch: np.ndarray, spec: AugmentationSpec,
               rng: np.random.Generator, donor_pool: Optional[np.ndarray] = None,
               feature_permutation: Optional[np.ndarray] = None,
               n_views: int = 2) -> ViewSet:
    """Build the view set a joint-embedding step consumes.

    Input-space kinds corrupt the batch independently per view; subsets
    slices it; mixup defers to the trainer (returns the uncorrupted batch
    twice, flagged representation_space).
    """
    batch = np.asarray(batch)
    if spec.kind == "subsets":
        if feature_permutation is None:
            raise ConfigError("subsets: feature_permutation is required")
        return make_subsets(batch, spec.k, spec.overlap_fraction, feature_permutation)
    if spec.kind == "mixup":
        return ViewSet(views=[batch.copy() for _ in range(n_views)],
                       representation_space=True)
    views = []
    for _ in range(n_views):
        if spec.kind == "swap_noise":
            if donor_pool is None:
                raise ConfigError("swap_noise: donor_pool is required")
            views.append(swap_noise(batch, spec.p, donor_pool, rng))
        elif spec.kind == "zero_out":
            views.append(zero_out(batch, spec.p, rng))
        elif spec.kind == "gaussian_noise":
            views.append(gaussian_noise(batch, spec.p, spec.mu, spec.sigma2, rng))
        elif spec.kind == "random_shuffle":
            views.append(random_shuffle(batch, rng))
        else:  # pragma: no cover
            raise ConfigError(f"unhandled kind {spec.kind!r}")
    return ViewSet(views=views)
