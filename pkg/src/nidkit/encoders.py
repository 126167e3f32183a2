"""The three representation backbones, interchangeable behind one interface.

Every encoder maps a (batch, width) feature matrix to a (batch, r)
representation; ``representation_dim`` reports r ahead of construction so the
projector can be sized. The MLP and CNN consume the one-hot expanded matrix
directly; the feature-tokenizer transformer splits it back into numerical
values and categorical indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn, tensor as T
from .data import SchemaError
from .nn import ConfigError
from .tensor import Tensor

ENCODER_KINDS = ("mlp", "cnn", "ft_transformer")

# (kind, parameter) rows of the convolutional stack, in order:
# kernel widths for conv layers, window sizes for pool layers.
CNN_STACK = (
    ("conv", 2, 32),
    ("conv", 2, 64),
    ("conv", 2, 128),
    ("pool", 3, None),
    ("conv", 2, 256),
    ("pool", 2, None),
    ("conv", 2, 512),
    ("pool", 4, None),
)


@dataclass
class EncoderConfig:
    """Architecture selector plus the input metadata the build needs.

    cat_cardinalities/cat_groups describe the one-hot blocks of the input
    matrix (used by the feature-tokenizer transformer; the other encoders
    ignore them and read the full width).
    """

    kind: str
    input_width: int
    numeric_cols: list = field(default_factory=list)
    cat_groups: dict = field(default_factory=dict)  # name -> column index list
    hidden_dim: int = 256
    token_dim: int = 32
    heads: int = 4
    layers: int = 4
    dropout: float = 0.1


def cnn_width_trace(input_width: int) -> list:
    """Width after each stage of the conv stack; raises naming the first
    stage the input is too narrow for."""
    w = input_width
    trace = []
    for i, (kind, size, _) in enumerate(CNN_STACK):
        if kind == "conv":
            if w < size:
                raise T.ShapeError(
                    f"cnn: width {w} too narrow for conv layer {i} (kernel {size})")
            w = w - size + 1
        else:
            if w < size:
                raise T.ShapeError(
                    f"cnn: width {w} too narrow for pool layer {i} (window {size})")
            w = w // size
        trace.append(w)
    return trace


def cnn_min_width() -> int:
    """Smallest input width the conv stack accepts, found from the trace."""
    w = 10
    while True:
        try:
            cnn_width_trace(w)
            return w
        except T.ShapeError:
            w += 1


def representation_dim(config: EncoderConfig) -> int:
    if config.kind == "mlp":
        return config.hidden_dim
    if config.kind == "cnn":
        return cnn_width_trace(config.input_width)[-1] * CNN_STACK[-2][2]
    if config.kind == "ft_transformer":
        n_features = len(config.numeric_cols) + len(config.cat_groups)
        if n_features == 0:
            n_features = config.input_width  # treat every column as numeric
        return n_features * config.token_dim
    raise ConfigError(f"unknown encoder kind {config.kind!r}")


class MLPEncoder(nn.Module):
    """Four fully connected layers, 256 wide, BN+ReLU after the first three."""

    def __init__(self, input_width: int, rng: np.random.Generator,
                 hidden_dim: int = 256, dtype=np.float64):
        super().__init__()
        self.input_width = input_width
        widths = [input_width, hidden_dim, hidden_dim, hidden_dim, hidden_dim]
        self.linears = [nn.Linear(widths[i], widths[i + 1], rng, dtype=dtype)
                        for i in range(4)]
        self.norms = [nn.BatchNorm1d(hidden_dim, dtype=dtype) for _ in range(3)]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise SchemaError(f"mlp: expected (b, {self.input_width}), got {x.shape}")
        h = x
        for i in range(3):
            h = T.relu(self.norms[i](self.linears[i](h)))
        return self.linears[3](h)


class CNNEncoder(nn.Module):
    """1xW convolutional stack over the feature vector viewed as a 1-row map."""

    def __init__(self, input_width: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        cnn_width_trace(input_width)  # fail fast while naming the layer
        self.input_width = input_width
        self.stages = []
        c_in = 1
        for kind, size, c_out in CNN_STACK:
            if kind == "conv":
                self.stages.append(nn.Conv2d1xW(c_in, c_out, size, rng, dtype=dtype))
                c_in = c_out
            else:
                self.stages.append(nn.MaxPool1xK(size))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise SchemaError(f"cnn: expected (b, {self.input_width}), got {x.shape}")
        b = x.shape[0]
        h = T.reshape(x, (b, 1, 1, self.input_width))
        for stage in self.stages:
            h = stage(h)
            if isinstance(stage, nn.Conv2d1xW):
                h = T.relu(h)
        return T.reshape(h, (b, h.shape[1] * h.shape[3]))

    def intermediate_shapes(self, x: Tensor) -> list:
        """(channels, width) after each stage — used to audit the stack."""
        b = x.shape[0]
        h = T.reshape(x, (b, 1, 1, self.input_width))
        shapes = []
        with T.no_grad():
            for stage in self.stages:
                h = stage(h)
                if isinstance(stage, nn.Conv2d1xW):
                    h = T.relu(h)
                shapes.append((h.shape[1], h.shape[3]))
        return shapes


class _TransformerBlock(nn.Module):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x)) with GELU."""

    def __init__(self, dim: int, heads: int, dropout: float,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, dtype=dtype)
        self.attn = nn.MultiHeadAttention(dim, heads, rng, dropout=dropout, dtype=dtype)
        self.ln2 = nn.LayerNorm(dim, dtype=dtype)
        ffn_hidden = int(round(4.0 / 3.0 * dim))
        self.ffn_in = nn.Linear(dim, ffn_hidden, rng, dtype=dtype)
        self.ffn_out = nn.Linear(ffn_hidden, dim, rng, dtype=dtype)
        self.ffn_drop = nn.Dropout(dropout, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x)))
        h = self.ffn_out(self.ffn_drop(T.gelu(self.ffn_in(self.ln2(x)))))
        return T.add(x, h)


class FTTransformerEncoder(nn.Module):
    """Feature-tokenizer transformer for mixed tabular inputs.

    Each numerical feature j becomes the token x_j * W_j + b_j; each
    categorical feature becomes an embedding row selected by its one-hot
    block. Tokens run through pre-norm transformer blocks and the final token
    matrix is flattened (no classification token).
    """

    def __init__(self, input_width: int, numeric_cols, cat_groups: dict,
                 rng: np.random.Generator, token_dim: int = 32, heads: int = 4,
                 layers: int = 4, dropout: float = 0.1, dtype=np.float64):
        super().__init__()
        self.input_width = input_width
        if not numeric_cols and not cat_groups:
            numeric_cols = list(range(input_width))
        self.numeric_cols = np.asarray(numeric_cols, dtype=np.int64)
        self.group_names = sorted(cat_groups)
        self.group_cols = [np.asarray(cat_groups[g], dtype=np.int64)
                           for g in self.group_names]
        self.token_dim = token_dim
        self.n_features = len(self.numeric_cols) + len(self.group_names)

        std = 1.0 / np.sqrt(token_dim)
        n_num = len(self.numeric_cols)
        self.num_weight = Tensor(rng.normal(scale=std, size=(n_num, token_dim)).astype(dtype),
                                 requires_grad=True)
        self.num_bias = Tensor(rng.normal(scale=std, size=(n_num, token_dim)).astype(dtype),
                               requires_grad=True)
        self.embeddings = [
            Tensor(rng.normal(scale=std, size=(len(cols), token_dim)).astype(dtype),
                   requires_grad=True)
            for cols in self.group_cols]
        self.blocks = [_TransformerBlock(token_dim, heads, dropout, rng, dtype=dtype)
                       for _ in range(layers)]

    def tokenize(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise SchemaError(f"ft: expected (b, {self.input_width}), got {x.shape}")
        b = x.shape[0]
        parts = []
        if len(self.numeric_cols):
            vals = x[(slice(None), self.numeric_cols)]          # (b, n_num)
            vals = T.reshape(vals, (b, len(self.numeric_cols), 1))
            parts.append(T.add(T.mul(vals, self.num_weight), self.num_bias))
        for cols, emb in zip(self.group_cols, self.embeddings):
            idx = np.argmax(x.values[:, cols], axis=1)
            token = emb[idx]                                     # (b, token_dim)
            parts.append(T.reshape(token, (b, 1, self.token_dim)))
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)

    def tokenize_indices(self, x_num: Tensor, cat_indices) -> Tensor:
        """Tokenizer entry point for pre-split inputs with explicit indices."""
        b = x_num.shape[0]
        parts = []
        if len(self.numeric_cols):
            vals = T.reshape(x_num, (b, len(self.numeric_cols), 1))
            parts.append(T.add(T.mul(vals, self.num_weight), self.num_bias))
        for g, (emb, idx) in enumerate(zip(self.embeddings, cat_indices)):
            idx = np.asarray(idx)
            if idx.min() < 0 or idx.max() >= emb.shape[0]:
                raise SchemaError(
                    f"ft: category index out of range for group {self.group_names[g]!r} "
                    f"(cardinality {emb.shape[0]})")
            parts.append(T.reshape(emb[idx], (b, 1, self.token_dim)))
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        tokens = self.tokenize(x)
        for block in self.blocks:
            tokens = block(tokens)
        b = tokens.shape[0]
        return T.reshape(tokens, (b, self.n_features * self.token_dim))


def build_encoder(config: EncoderConfig, rng: np.random.Generator,
                  dtype=np.float64) -> nn.Module:
    if config.kind == "mlp":
        return MLPEncoder(config.input_width, rng, hidden_dim=config.hidden_dim,
                          dtype=dtype)
    if config.kind == "cnn":
        return CNNEncoder(config.input_width, rng, dtype=dtype)
    if config.kind == "ft_transformer":
        return FTTransformerEncoder(
            config.input_width, list(config.numeric_cols), dict(config.cat_groups),
            rng, token_dim=config.token_dim, heads=config.heads,
            layers=config.layers, dropout=config.dropout, dtype=dtype)
    raise ConfigError(f"unknown encoder kind {config.kind!r}")
