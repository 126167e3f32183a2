"""Layers, parameter containers, the ADAM optimizer, and checkpoint I/O.

Layers compose the primitives in :mod:`nidkit.tensor`, so backward rules come
for free from the tape. Construction is explicit about randomness: every
layer that draws initial weights takes a ``numpy.random.Generator``.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_VERSION = 1


class BatchSizeError(ValueError):
    """Training-mode batch statistics need at least two rows."""


class ConfigError(ValueError):
    """Layer hyperparameters are inconsistent."""


class OptimizerError(RuntimeError):
    """A trainable parameter is missing its gradient."""


class CheckpointError(ValueError):
    """Stored parameters disagree with the receiving model."""


# ---------------------------------------------------------------------------
# Module container


class Module:
    """Base class: tracks sub-modules and parameter tensors by attribute walk.

    Attributes holding a Tensor with ``requires_grad`` are trainable
    parameters; Tensors without it (running statistics) are buffers that are
    checkpointed but never updated by the optimizer. Lists of Modules are
    traversed with positional names.
    """

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, attr in vars(self).items():
            if isinstance(attr, Module):
                yield name, attr
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, attr in vars(self).items():
            if isinstance(attr, Tensor) and attr.requires_grad:
                yield prefix + name, attr
        for cname, child in self._children():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, attr in vars(self).items():
            if isinstance(attr, Tensor) and not attr.requires_grad:
                yield prefix + name, attr
        for cname, child in self._children():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.values.copy() for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[name] = b.values.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        own.update(dict(self.named_buffers()))
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"checkpoint missing entries: {sorted(missing)}")
        for name, tensor in own.items():
            arr = np.asarray(state[name])
            if arr.shape != tensor.values.shape:
                raise ValueError(
                    f"{name}: checkpoint shape {arr.shape} != model shape {tensor.values.shape}")
            tensor.values = arr.astype(tensor.values.dtype)


# ---------------------------------------------------------------------------
# Core layers


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, shape,
                     dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """Affine map x @ W + b with fan-in-scaled uniform initialization."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float64):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(
            _kaiming_uniform(rng, in_features, (in_features, out_features), dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise T.ShapeError(
                f"linear: input width {x.shape[-1]} != {self.in_features}")
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class BatchNorm1d(Module):
    """Batch normalization over axis 0 of a (batch, features) tensor.

    Training mode normalizes with current-batch statistics (population
    variance) and folds them into the running estimates with the given
    momentum; eval mode normalizes with the running estimates.
    """

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float64):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(num_features, dtype=dtype))
        self.running_var = Tensor(np.ones(num_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.num_features:
            raise T.ShapeError(f"batch_norm: expected (b, {self.num_features}), got {x.shape}")
        if self.training:
            if x.shape[0] < 2:
                raise BatchSizeError("batch_norm: training mode needs batch size >= 2")
            mean = T.tmean(x, axis=0)
            var = T.tvar(x, axis=0)
            with T.no_grad():
                m = self.momentum
                self.running_mean.values = (1 - m) * self.running_mean.values + m * mean.values
                self.running_var.values = (1 - m) * self.running_var.values + m * var.values
        else:
            mean = self.running_mean.detach()
            var = self.running_var.detach()
        inv = T.div(T.sub(x, mean), T.sqrt(T.add(var, Tensor(np.full(
            self.num_features, self.eps, dtype=x.dtype)))))
        return T.add(T.mul(inv, self.gamma), self.beta)


class LayerNorm(Module):
    """Per-row normalization over the last axis with affine parameters."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise T.ShapeError(f"layer_norm: last axis {x.shape[-1]} != {self.dim}")
        mean = T.tmean(x, axis=-1, keepdims=True)
        var = T.tvar(x, axis=-1, keepdims=True)
        eps = Tensor(np.asarray(self.eps, dtype=x.dtype))
        xhat = T.div(T.sub(x, mean), T.sqrt(T.add(var, eps)))
        return T.add(T.mul(xhat, self.gamma), self.beta)


class Dropout(Module):
    """Inverted dropout: scales surviving activations by 1/(1-p) in training,
    exact identity in eval mode."""

    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability {p} outside [0, 1)")
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = 1.0 - self.p
        mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / keep
        return T.mul(x, Tensor(mask))


class Conv2d1xW(Module):
    """Valid cross-correlation with 1-row kernels over (b, C_in, 1, W) maps.

    Stride 1 and no padding, matching the width bookkeeping an intrusion-
    detection feature vector needs when treated as a 1xW image.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_width: int,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_width = kernel_width
        fan_in = in_channels * kernel_width
        self.weight = Tensor(
            _kaiming_uniform(rng, fan_in, (fan_in, out_channels), dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2] != 1:
            raise T.ShapeError(
                f"conv2d_1xw: expected (b, {self.in_channels}, 1, W), got {x.shape}")
        b, c, _, w = x.shape
        kw = self.kernel_width
        if w < kw:
            raise T.ShapeError(f"conv2d_1xw: width {w} < kernel width {kw}")
        w_out = w - kw + 1
        x3 = T.reshape(x, (b, c, w))
        idx = np.arange(w_out)[:, None] + np.arange(kw)[None, :]
        windows = x3[(slice(None), slice(None), idx)]        # (b, c, w_out, kw)
        windows = T.transpose(windows, (0, 2, 1, 3))          # (b, w_out, c, kw)
        windows = T.reshape(windows, (b, w_out, c * kw))
        out = T.add(T.matmul(windows, self.weight), self.bias)  # (b, w_out, c_out)
        out = T.transpose(out, (0, 2, 1))
        return T.reshape(out, (b, self.out_channels, 1, w_out))


class MaxPool1xK(Module):
    """Non-overlapping max over width windows; stride = k, remainder dropped."""

    def __init__(self, k: int):
        super().__init__()
        self.k = k

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[2] != 1:
            raise T.ShapeError(f"maxpool_1xk: expected (b, C, 1, W), got {x.shape}")
        b, c, _, w = x.shape
        k = self.k
        if w < k:
            raise T.ShapeError(f"maxpool_1xk: width {w} < window {k}")
        w_out = w // k
        x3 = T.reshape(x, (b, c, w))
        if w_out * k != w:
            x3 = x3[(slice(None), slice(None), slice(0, w_out * k))]
        xr = T.reshape(x3, (b, c, w_out, k))
        # winner positions are data, not graph: gather routes the gradient
        am = np.argmax(xr.values, axis=-1)
        bi = np.arange(b)[:, None, None]
        ci = np.arange(c)[None, :, None]
        wi = np.arange(w_out)[None, None, :]
        out = xr[(bi, ci, wi, am)]
        return T.reshape(out, (b, c, 1, w_out))


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention with per-head splitting.

    Query/key/value/output projections are all square maps on the token
    dimension; dropout acts on the attention weights in training mode.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 dropout: float = 0.0, dtype=np.float64):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng, dtype=dtype)
        self.wk = Linear(dim, dim, rng, dtype=dtype)
        self.wv = Linear(dim, dim, rng, dtype=dtype)
        self.wo = Linear(dim, dim, rng, dtype=dtype)
        self.drop = Dropout(dropout, rng)

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        return T.transpose(T.reshape(x, (b, t, self.heads, self.head_dim)),
                           (0, 2, 1, 3))

    def forward(self, x: Tensor, return_weights: bool = False):
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise T.ShapeError(f"attention: expected (b, t, {self.dim}), got {x.shape}")
        b, t, _ = x.shape
        q = self._split(self.wq(x), b, t)
        k = self._split(self.wk(x), b, t)
        v = self._split(self.wv(x), b, t)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        scores = T.mul(scores, Tensor(np.asarray(1.0 / np.sqrt(self.head_dim),
                                                 dtype=x.dtype)))
        attn = T.softmax(scores, axis=-1)
        dropped = self.drop(attn)
        ctx = T.matmul(dropped, v)                            # (b, h, t, hd)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, self.dim))
        out = self.wo(ctx)
        if return_weights:
            return out, attn
        return out


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """ADAM with bias correction; operates in place on a module's parameters."""

    def __init__(self, module: Module, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.named = list(module.named_parameters())
        names = [n for n, _ in self.named]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate parameter names in module")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {n: np.zeros_like(p.values) for n, p in self.named}
        self._v = {n: np.zeros_like(p.values) for n, p in self.named}

    def step(self) -> None:
        for name, p in self.named:
            if p.grad is None:
                raise OptimizerError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in self.named:
            g = p.grad
            m = self._m[name] = b1 * self._m[name] + (1 - b1) * g
            v = self._v[name] = b2 * self._v[name] + (1 - b2) * (g * g)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.values = p.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, module: Module, extra: Optional[dict] = None) -> None:
    """Write parameters + buffers to a versioned ``.npz`` archive.

    Keys are the dotted parameter names; ``__version__`` carries the format
    revision; entries in ``extra`` are stored under ``meta/<key>``.
    """
    payload = {name: arr for name, arr in module.state_dict().items()}
    payload["__version__"] = np.asarray(CHECKPOINT_VERSION)
    for key, val in (extra or {}).items():
        payload[f"meta/{key}"] = np.asarray(val)
    np.savez(path, **payload)


def load_checkpoint(path, module: Optional[Module] = None) -> dict:
    """Read a checkpoint; optionally load it into ``module`` (shape-checked)."""
    with np.load(path, allow_pickle=False) as archive:
        data = {k: archive[k] for k in archive.files}
    version = int(data.pop("__version__", -1))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = {k[len("meta/"):]: data.pop(k) for k in list(data) if k.startswith("meta/")}
    if module is not None:
        module.load_state_dict(data)
    return {"state": data, "meta": meta, "version": version}
