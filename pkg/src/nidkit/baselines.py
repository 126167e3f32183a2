"""Reconstruction and one-class baselines trained directly on features.

Both are scored the same way as the representation detector: higher score,
more anomalous.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import nn, tensor as T
from .data import DataError
from .tensor import Tensor


class Autoencoder(nn.Module):
    """Bottleneck MLP input -> hidden -> latent -> hidden -> input.

    Hidden layers use BatchNorm + ReLU; the output layer is a plain linear
    map so reconstructions are unconstrained. ``linear=True`` drops the
    normalization and activations, leaving a purely linear stack (useful for
    sanity checks).
    """

    def __init__(self, input_dim: int, rng, hidden: int = 256, latent: int = 64,
                 linear: bool = False, dtype=np.float64):
        super().__init__()
        widths = [input_dim, hidden, latent, hidden, input_dim]
        self.linear = linear
        self.layers = [nn.Linear(widths[i], widths[i + 1], rng, dtype=dtype)
                       for i in range(4)]
        self.norms = [] if linear else [
            nn.BatchNorm1d(w, dtype=dtype) for w in widths[1:4]]

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < 3 and not self.linear:
                h = T.relu(self.norms[i](h))
        return h


def reconstruction_loss(model: Autoencoder, batch: Tensor) -> Tensor:
    diff = model(batch) - batch
    return T.tmean(diff * diff)


def ae_score(model: Autoencoder, features: np.ndarray,
             batch_size: int = 512) -> np.ndarray:
    """Per-sample mean squared reconstruction error."""
    model.eval()
    features = np.asarray(features)
    out = np.empty(features.shape[0])
    with T.no_grad():
        for start in range(0, features.shape[0], batch_size):
            x = features[start:start + batch_size]
            rec = model(Tensor(x)).values
            out[start:start + batch_size] = np.mean((rec - x) ** 2, axis=1)
    return out


class DeepSVDD(nn.Module):
    """One-class network with a fixed hypersphere center.

    Every linear map is bias-free and there is no normalization layer:
    any translation-capable parameter would let the network collapse onto
    the center for free. The center ``c`` is set once from the untrained
    network's outputs and never updated afterwards.
    """

    def __init__(self, input_dim: int, rng, widths=(256, 64, 32),
                 dtype=np.float64):
        super().__init__()
        dims = [input_dim, *widths]
        self.layers = [nn.Linear(dims[i], dims[i + 1], rng, bias=False, dtype=dtype)
                       for i in range(len(dims) - 1)]
        self.center = Tensor(np.zeros(dims[-1], dtype=dtype))
        self._center_set = False

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = T.relu(h)
        return h


def svdd_init_center(model: DeepSVDD, features: np.ndarray,
                     batch_size: int = 512) -> np.ndarray:
    """Fix c at the mean initial-network output over the training set.

    A center too close to the origin makes the trivial all-zero map optimal,
    so a warning is raised if every coordinate is within 1e-3 of zero.
    """
    features = np.asarray(features)
    if features.shape[0] == 0:
        raise DataError("svdd_init_center: empty training set")
    model.eval()
    total = None
    with T.no_grad():
        for start in range(0, features.shape[0], batch_size):
            out = model(Tensor(features[start:start + batch_size])).values
            s = out.sum(axis=0)
            total = s if total is None else total + s
    c = total / features.shape[0]
    if np.all(np.abs(c) < 1e-3):
        warnings.warn("hypersphere center is nearly zero; training may "
                      "collapse to the trivial solution", RuntimeWarning)
    model.center = Tensor(c)
    model._center_set = True
    return c


def svdd_loss(model: DeepSVDD, batch: Tensor) -> Tensor:
    diff = model(batch) - model.center
    return T.tmean(T.tsum(diff * diff, axis=1))


def svdd_score(model: DeepSVDD, features: np.ndarray,
               batch_size: int = 512) -> np.ndarray:
    """Squared distance of the network output to the fixed center."""
    model.eval()
    features = np.asarray(features)
    out = np.empty(features.shape[0])
    with T.no_grad():
        for start in range(0, features.shape[0], batch_size):
            y = model(Tensor(features[start:start + batch_size])).values
            out[start:start + batch_size] = np.sum(
                (y - model.center.values) ** 2, axis=1)
    return out


def _epoch_batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n - batch_size + 1, batch_size)]


def train_baseline(model, features: np.ndarray, loss_fn, optimizer: nn.Adam,
                   epochs: int, batch_size: int, rng) -> list:
    """Minibatch training loop shared by both baselines.

    For DeepSVDD the center must already be fixed; it is stored outside the
    optimizer's parameter list, so its bits cannot change during training.
    Returns the per-step loss history.
    """
    if isinstance(model, DeepSVDD) and not model._center_set:
        raise nn.ConfigError("DeepSVDD center must be initialized before training")
    features = np.asarray(features)
    history = []
    model.train()
    for _ in range(epochs):
        for idx in _epoch_batches(features.shape[0], batch_size, rng):
            T.reset_tape()
            model.zero_grad()
            loss = loss_fn(model, Tensor(features[idx]))
            T.backward(loss)
            optimizer.step()
            history.append(float(loss.values))
            T.reset_tape()
    model.eval()
    return history
