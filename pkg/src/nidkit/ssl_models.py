"""Five non-contrastive joint-embedding objectives and their training loop.

Each model couples a shared encoder with a two-layer projection head (BN+ReLU
between the layers, 256-wide output for every kind). BYOL adds a predictor on
the online branch plus EMA target copies of encoder and projector; SimSiam
adds only the predictor and stops gradients on the target side; Barlow Twins,
VICReg, and W-MSE are symmetric and avoid collapse through their statistics
terms (cross-correlation to identity, variance hinge + covariance penalty,
and hard whitening respectively).

Gradient-bearing math uses :mod:`nidkit.tensor` throughout so the tape
provides exact backward rules, including through the Cholesky whitening.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn, tensor as T
from .augment import AugmentationSpec, ViewSet, make_views, mixup_partners
from .nn import BatchSizeError, CheckpointError, ConfigError
from .tensor import Tensor

MODEL_KINDS = ("byol", "simsiam", "barlow_twins", "vicreg", "wmse")

_NORM_EPS = 1e-12


class NormalizationError(ValueError):
    """A row with exactly zero norm cannot be direction-normalized."""


@dataclass
class LossBreakdown:
    """Scalar loss with its per-term decomposition (empty for single-term
    objectives)."""

    total: float
    terms: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Loss functions


def _row_normalize(x: Tensor) -> Tensor:
    sq = T.tsum(T.mul(x, x), axis=-1, keepdims=True)
    if np.any(sq.values == 0.0):
        raise NormalizationError("zero-norm row in embedding batch")
    return T.div(x, T.sqrt(T.add(sq, Tensor(np.asarray(_NORM_EPS, dtype=x.dtype)))))


def _mean_cosine(a: Tensor, b: Tensor) -> Tensor:
    return T.tmean(T.tsum(T.mul(_row_normalize(a), _row_normalize(b)), axis=-1))


def byol_loss(q: Tensor, z_target: Tensor) -> Tensor:
    """One direction of the BYOL objective: mean ||q_hat - z_hat||^2, which
    equals 2 - 2 cos per row. The caller blocks gradients on ``z_target`` and
    averages the two view orderings."""
    two = Tensor(np.asarray(2.0, dtype=q.dtype))
    return T.sub(two, T.mul(two, _mean_cosine(q, z_target)))


def simsiam_loss(p: Tensor, p2: Tensor, z: Tensor, z2: Tensor) -> Tensor:
    """-1/2 cos(p, z') - 1/2 cos(p', z); z and z' must arrive detached."""
    half = Tensor(np.asarray(0.5, dtype=p.dtype))
    return T.negate(T.add(T.mul(half, _mean_cosine(p, z2)),
                          T.mul(half, _mean_cosine(p2, z))))


def _column_standardize(z: Tensor) -> Tensor:
    mean = T.tmean(z, axis=0)
    var = T.tvar(z, axis=0)
    std = T.sqrt(T.add(var, Tensor(np.asarray(_NORM_EPS, dtype=z.dtype))))
    return T.div(T.sub(z, mean), std)


def _offdiag_sumsq(c: Tensor) -> Tensor:
    d = c.shape[0]
    diag = c[(np.arange(d), np.arange(d))]
    return T.sub(T.tsum(T.mul(c, c)), T.tsum(T.mul(diag, diag)))


def barlow_twins_loss(z: Tensor, z2: Tensor, lambda_bt: float = 5e-3):
    """Cross-correlation redundancy reduction.

    C = (1/b) Zhat^T Zhat' on batch-standardized embeddings; the on-diagonal
    term pulls C_ii to 1, the off-diagonal term (weighted lambda_bt) pushes
    C_ij to 0. Returns (loss tensor, LossBreakdown).
    """
    if z.shape[0] < 2:
        raise BatchSizeError("barlow_twins: need batch size >= 2")
    b = z.shape[0]
    c = T.mul(T.matmul(T.transpose(_column_standardize(z)), _column_standardize(z2)),
              Tensor(np.asarray(1.0 / b, dtype=z.dtype)))
    d = c.shape[0]
    diag = c[(np.arange(d), np.arange(d))]
    one = Tensor(np.ones(d, dtype=z.dtype))
    on_diag = T.tsum(T.power(T.sub(one, diag), 2.0))
    off_diag = _offdiag_sumsq(c)
    total = T.add(on_diag, T.mul(off_diag, Tensor(np.asarray(lambda_bt, dtype=z.dtype))))
    return total, LossBreakdown(total=float(total.values), terms={
        "on_diag": float(on_diag.values), "off_diag": float(off_diag.values)})


def _vicreg_branch_terms(z: Tensor, gamma: float, eps: float):
    b, d = z.shape
    var = T.tvar(z, axis=0)
    std = T.sqrt(T.add(var, Tensor(np.asarray(eps, dtype=z.dtype))))
    hinge = T.tmean(T.relu(T.sub(Tensor(np.full(d, gamma, dtype=z.dtype)), std)))
    centered = T.sub(z, T.tmean(z, axis=0))
    cov = T.mul(T.matmul(T.transpose(centered), centered),
                Tensor(np.asarray(1.0 / b, dtype=z.dtype)))
    cov_pen = T.div(_offdiag_sumsq(cov), Tensor(np.asarray(float(d), dtype=z.dtype)))
    return hinge, cov_pen


def vicreg_loss(z: Tensor, z2: Tensor, lam: float = 25.0, mu: float = 25.0,
                nu: float = 1.0, gamma: float = 1.0, eps: float = 1e-4):
    """Variance-invariance-covariance regularization.

    total = lam * mean elementwise (z - z')^2
          + mu * [hinge(z) + hinge(z')]          (per-dim std vs gamma)
          + nu * [covpen(z) + covpen(z')]        (off-diag^2 / d per branch)
    Batch statistics use population denominators. Returns (tensor, breakdown).
    """
    if z.shape[0] < 2:
        raise BatchSizeError("vicreg: need batch size >= 2")
    diff = T.sub(z, z2)
    inv = T.tmean(T.mul(diff, diff))
    h1, c1 = _vicreg_branch_terms(z, gamma, eps)
    h2, c2 = _vicreg_branch_terms(z2, gamma, eps)
    var_term = T.add(h1, h2)
    cov_term = T.add(c1, c2)
    dt = z.dtype
    total = T.add(T.add(T.mul(inv, Tensor(np.asarray(lam, dtype=dt))),
                        T.mul(var_term, Tensor(np.asarray(mu, dtype=dt)))),
                  T.mul(cov_term, Tensor(np.asarray(nu, dtype=dt))))
    return total, LossBreakdown(total=float(total.values), terms={
        "invariance": float(inv.values),
        "variance": float(var_term.values),
        "covariance": float(cov_term.values)})


def whiten_slice(x: Tensor, eps: float = 1e-4) -> Tensor:
    """Whiten a (s, d) sub-batch: center, Cholesky of the jittered covariance,
    triangular solve. Output rows have identity covariance up to the jitter."""
    s, d = x.shape
    centered = T.sub(x, T.tmean(x, axis=0))
    cov = T.mul(T.matmul(T.transpose(centered), centered),
                Tensor(np.asarray(1.0 / s, dtype=x.dtype)))
    cov = T.add(cov, Tensor((eps * np.eye(d)).astype(x.dtype)))
    l = T.cholesky(cov)
    return T.transpose(T.triangular_solve(l, T.transpose(centered)))


def wmse_loss(z: Tensor, z2: Tensor, slice_size: int = 32, eps: float = 1e-4) -> Tensor:
    """Whitening MSE: l2-normalize rows, slice the batch, whiten each branch's
    sub-batch independently, and compare elementwise. Remainder rows beyond
    the last full sub-batch are dropped."""
    if slice_size < 2:
        raise ConfigError(f"wmse: slice_size {slice_size} must be >= 2")
    b = z.shape[0]
    n_slices = b // slice_size
    if n_slices == 0:
        raise BatchSizeError(f"wmse: batch {b} smaller than slice_size {slice_size}")
    zn = _row_normalize(z)
    zn2 = _row_normalize(z2)
    acc = None
    for i in range(n_slices):
        sl = slice(i * slice_size, (i + 1) * slice_size)
        w1 = whiten_slice(zn[sl], eps=eps)
        w2 = whiten_slice(zn2[sl], eps=eps)
        diff = T.sub(w1, w2)
        term = T.tmean(T.mul(diff, diff))
        acc = term if acc is None else T.add(acc, term)
    return T.mul(acc, Tensor(np.asarray(1.0 / n_slices, dtype=z.dtype)))


# ---------------------------------------------------------------------------
# Heads


class ProjectionHead(nn.Module):
    """Two fully connected layers with BN+ReLU between, fixed 256-wide output."""

    def __init__(self, in_dim: int, rng: np.random.Generator, dim: int = 256,
                 dtype=np.float64):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, dim, rng, dtype=dtype)
        self.bn = nn.BatchNorm1d(dim, dtype=dtype)
        self.fc2 = nn.Linear(dim, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.bn(self.fc1(x))))


def _freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad = False
    return module


def ema_update(online: nn.Module, target: nn.Module, tau: float) -> None:
    """target <- tau * target + (1 - tau) * online, for every parameter and
    buffer, matched by name."""
    target_map = dict(target.named_parameters())
    target_map.update(dict(target.named_buffers()))
    for name, arr in online.state_dict().items():
        if name not in target_map:
            raise CheckpointError(f"ema_update: target missing {name!r}")
        tv = target_map[name]
        if tv.values.shape != arr.shape:
            raise CheckpointError(
                f"ema_update: {name!r} shape {tv.values.shape} != {arr.shape}")
        tv.values = tau * tv.values + (1.0 - tau) * arr


def _mixup_tensor(y: Tensor, alpha: float, partners: np.ndarray) -> Tensor:
    a = Tensor(np.asarray(alpha, dtype=y.dtype))
    b = Tensor(np.asarray(1.0 - alpha, dtype=y.dtype))
    return T.add(T.mul(y, a), T.mul(y[partners], b))


# ---------------------------------------------------------------------------
# Models


class SSLModel(nn.Module):
    """Shared plumbing: encoder -> (optional representation mixup) -> projector,
    multi-view pair averaging, per-kind pair loss."""

    kind = "base"
    term_names: tuple = ()

    def __init__(self, encoder: nn.Module, rep_dim: int,
                 rng: np.random.Generator, dim: int = 256, dtype=np.float64):
        super().__init__()
        self.encoder = encoder
        self.projector = ProjectionHead(rep_dim, rng, dim=dim, dtype=dtype)
        self.embed_dim = dim

    # -- per-kind hooks ------------------------------------------------------

    def _view_state(self, view: Tensor, partners: Optional[np.ndarray],
                    alpha: float) -> dict:
        y = self.encoder(view)
        if partners is not None:
            y = _mixup_tensor(y, alpha, partners)
        return {"z": self.projector(y)}

    def _pair_loss(self, si: dict, sj: dict):
        raise NotImplementedError

    def after_step(self) -> None:
        """Post-optimizer hook (EMA update for BYOL)."""

    # -- shared loss ----------------------------------------------------------

    def compute_loss(self, view_set: ViewSet, alpha: float = 0.9,
                     rng: Optional[np.random.Generator] = None):
        """Mean pairwise loss over all C(k, 2) view pairs.

        Mixup view sets get per-view partner rows drawn here; the same
        partners are reused for every branch pass of that view.
        """
        views = [Tensor(np.asarray(v)) for v in view_set.views]
        if len(views) < 2:
            raise ConfigError("need at least two views")
        partners = [None] * len(views)
        if view_set.representation_space:
            if rng is None:
                raise ConfigError("mixup views need an rng for partner draws")
            partners = [mixup_partners(v.shape[0], rng) for v in views]

        states = [self._view_state(v, p, alpha) for v, p in zip(views, partners)]
        total, terms, n_pairs = None, {}, 0
        for i in range(len(states)):
            for j in range(i + 1, len(states)):
                pair, pair_terms = self._pair_loss(states[i], states[j])
                total = pair if total is None else T.add(total, pair)
                for key, val in pair_terms.items():
                    terms[key] = terms.get(key, 0.0) + val
                n_pairs += 1
        if n_pairs > 1:
            total = T.mul(total, Tensor(np.asarray(1.0 / n_pairs, dtype=total.dtype)))
            terms = {k: v / n_pairs for k, v in terms.items()}
        return total, LossBreakdown(total=float(total.values), terms=terms)


class BYOL(SSLModel):
    """Online encoder/projector/predictor against EMA target copies."""

    kind = "byol"

    def __init__(self, encoder: nn.Module, target_encoder: nn.Module,
                 rep_dim: int, rng: np.random.Generator, dim: int = 256,
                 tau: float = 0.99, dtype=np.float64):
        super().__init__(encoder, rep_dim, rng, dim=dim, dtype=dtype)
        self.predictor = ProjectionHead(dim, rng, dim=dim, dtype=dtype)
        self.tau = tau
        target_encoder.load_state_dict(encoder.state_dict())
        self.target_encoder = _freeze(target_encoder)
        self.target_projector = ProjectionHead(rep_dim, rng, dim=dim, dtype=dtype)
        self.target_projector.load_state_dict(self.projector.state_dict())
        _freeze(self.target_projector)

    def _view_state(self, view, partners, alpha):
        state = super()._view_state(view, partners, alpha)
        state["q"] = self.predictor(state["z"])
        yt = self.target_encoder(view)
        if partners is not None:
            yt = _mixup_tensor(yt, alpha, partners)
        state["t"] = self.target_projector(yt).detach()
        return state

    def _pair_loss(self, si, sj):
        half = Tensor(np.asarray(0.5))
        loss = T.mul(half, T.add(byol_loss(si["q"], sj["t"]),
                                 byol_loss(sj["q"], si["t"])))
        return loss, {}

    def after_step(self):
        ema_update(self.encoder, self.target_encoder, self.tau)
        ema_update(self.projector, self.target_projector, self.tau)


class SimSiam(SSLModel):
    """Shared weights on both branches; stop-gradient opposite the predictor."""

    kind = "simsiam"

    def __init__(self, encoder, rep_dim, rng, dim=256, dtype=np.float64):
        super().__init__(encoder, rep_dim, rng, dim=dim, dtype=dtype)
        self.predictor = ProjectionHead(dim, rng, dim=dim, dtype=dtype)

    def _view_state(self, view, partners, alpha):
        state = super()._view_state(view, partners, alpha)
        state["p"] = self.predictor(state["z"])
        return state

    def _pair_loss(self, si, sj):
        loss = simsiam_loss(si["p"], sj["p"], si["z"].detach(), sj["z"].detach())
        return loss, {}


class BarlowTwins(SSLModel):
    kind = "barlow_twins"
    term_names = ("on_diag", "off_diag")

    def __init__(self, encoder, rep_dim, rng, dim=256, lambda_bt=5e-3,
                 dtype=np.float64):
        super().__init__(encoder, rep_dim, rng, dim=dim, dtype=dtype)
        self.lambda_bt = lambda_bt

    def _pair_loss(self, si, sj):
        loss, br = barlow_twins_loss(si["z"], sj["z"], self.lambda_bt)
        return loss, br.terms


class VICReg(SSLModel):
    kind = "vicreg"
    term_names = ("invariance", "variance", "covariance")

    def __init__(self, encoder, rep_dim, rng, dim=256, lam=25.0, mu=25.0,
                 nu=1.0, gamma=1.0, eps=1e-4, dtype=np.float64):
        super().__init__(encoder, rep_dim, rng, dim=dim, dtype=dtype)
        self.lam, self.mu, self.nu = lam, mu, nu
        self.gamma, self.eps = gamma, eps

    def _pair_loss(self, si, sj):
        loss, br = vicreg_loss(si["z"], sj["z"], self.lam, self.mu, self.nu,
                               self.gamma, self.eps)
        return loss, br.terms


class WMSE(SSLModel):
    kind = "wmse"

    def __init__(self, encoder, rep_dim, rng, dim=256, slice_size=32,
                 eps=1e-4, dtype=np.float64):
        super().__init__(encoder, rep_dim, rng, dim=dim, dtype=dtype)
        self.slice_size = slice_size
        self.eps = eps

    def _pair_loss(self, si, sj):
        return wmse_loss(si["z"], sj["z"], self.slice_size, self.eps), {}


def build_model(kind: str, encoder_factory, rep_dim: int,
                rng: np.random.Generator, dim: int = 256, dtype=np.float64,
                **hyper) -> SSLModel:
    """Construct an SSL model; ``encoder_factory()`` must build a fresh
    encoder each call (BYOL needs a second copy for the EMA target)."""
    if kind == "byol":
        return BYOL(encoder_factory(), encoder_factory(), rep_dim, rng,
                    dim=dim, dtype=dtype, **hyper)
    if kind == "simsiam":
        return SimSiam(encoder_factory(), rep_dim, rng, dim=dim, dtype=dtype, **hyper)
    if kind == "barlow_twins":
        return BarlowTwins(encoder_factory(), rep_dim, rng, dim=dim, dtype=dtype, **hyper)
    if kind == "vicreg":
        return VICReg(encoder_factory(), rep_dim, rng, dim=dim, dtype=dtype, **hyper)
    if kind == "wmse":
        return WMSE(encoder_factory(), rep_dim, rng, dim=dim, dtype=dtype, **hyper)
    raise ConfigError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# Training loop


def train_step(model: SSLModel, view_set: ViewSet, optimizer: nn.Adam,
               alpha: float = 0.9,
               rng: Optional[np.random.Generator] = None) -> LossBreakdown:
    """One optimization step: forward all views, backward, ADAM, EMA hook."""
    T.reset_tape()
    model.zero_grad()
    loss, breakdown = model.compute_loss(view_set, alpha=alpha, rng=rng)
    T.backward(loss)
    optimizer.step()
    model.after_step()
    T.reset_tape()
    return breakdown


def pretrain(model: SSLModel, features: np.ndarray, spec: AugmentationSpec,
             optimizer: nn.Adam, epochs: int, batch_size: int,
             rng: np.random.Generator,
             feature_permutation: Optional[np.ndarray] = None,
             log_path=None) -> list:
    """Self-supervised pretraining over a feature matrix of normal traffic.

    Batches are drawn without replacement each epoch (trailing partial batch
    dropped to keep batch statistics uniform); the feature matrix itself is
    the donor pool for swap noise. Returns the per-step LossBreakdown list
    and, when ``log_path`` is given, writes a step,total,<terms> CSV.
    """
    n = features.shape[0]
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2")
    history = []
    log_fh = open(log_path, "w", newline="") if log_path else None
    try:
        writer = None
        if log_fh:
            writer = csv.writer(log_fh)
            writer.writerow(["step", "total", *model.term_names])
        step = 0
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n - batch_size + 1, batch_size):
                batch = features[order[start:start + batch_size]]
                view_set = make_views(batch, spec, rng, donor_pool=features,
                                      feature_permutation=feature_permutation)
                breakdown = train_step(model, view_set, optimizer,
                                       alpha=spec.alpha, rng=rng)
                history.append(breakdown)
                if writer:
                    writer.writerow([step, repr(breakdown.total),
                                     *(repr(breakdown.terms[t]) for t in model.term_names)])
                step += 1
    finally:
        if log_fh:
            log_fh.close()
    return history
