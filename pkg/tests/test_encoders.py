"""Encoder shape conformance, determinism, and gradient checks."""

import numpy as np
import pytest

from nidkit import encoders, nn, tensor as T
from nidkit.data import SchemaError
from nidkit.tensor import Tensor
from oracles import check_module_grad


@pytest.fixture(autouse=True)
def clean_tape():
    T.reset_tape()
    yield
    T.reset_tape()


def rng_(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# MLP

def test_mlp_output_shape():
    for d in (5, 20, 196):
        enc = encoders.MLPEncoder(d, rng_(1))
        out = enc(Tensor(rng_(2).normal(size=(4, d))))
        assert out.shape == (4, 256)


def test_mlp_identical_rows_identical_outputs():
    enc = encoders.MLPEncoder(6, rng_(3)).eval()
    row = rng_(4).normal(size=6)
    batch = np.vstack([row, rng_(5).normal(size=6), row])
    out = enc(Tensor(batch)).values
    np.testing.assert_array_equal(out[0], out[2])


def test_mlp_width_guard():
    enc = encoders.MLPEncoder(6, rng_(6))
    with pytest.raises(SchemaError):
        enc(Tensor(np.ones((2, 7))))


def test_mlp_grad():
    enc = encoders.MLPEncoder(5, rng_(7), hidden_dim=6)
    check_module_grad(enc, [rng_(8).normal(size=(4, 5))],
                      lambda m, ts: m(ts[0]), rtol=1e-4, label="mlp",
                      max_coords_per_param=10)


# ---------------------------------------------------------------------------
# CNN

def test_cnn_width_trace_196():
    assert encoders.cnn_width_trace(196) == [195, 194, 193, 64, 63, 31, 30, 7]


def test_cnn_intermediate_shapes_196():
    enc = encoders.CNNEncoder(196, rng_(9))
    shapes = enc.intermediate_shapes(Tensor(np.zeros((1, 196))))
    assert shapes == [(32, 195), (64, 194), (128, 193), (128, 64),
                      (256, 63), (256, 31), (512, 30), (512, 7)]


def test_cnn_representation_width_196():
    enc = encoders.CNNEncoder(196, rng_(10))
    out = enc(Tensor(rng_(11).normal(size=(2, 196))))
    assert out.shape == (2, 3584)


def test_cnn_minimum_width():
    # found by sweeping the width trace: 36 is the narrowest input that
    # survives every conv/pool reduction
    assert encoders.cnn_min_width() == 36
    encoders.CNNEncoder(36, rng_(12))
    with pytest.raises(T.ShapeError):
        encoders.CNNEncoder(35, rng_(13))


def test_cnn_guard_names_failing_layer():
    with pytest.raises(T.ShapeError, match="layer"):
        encoders.cnn_width_trace(12)


def test_cnn_grad():
    enc = encoders.CNNEncoder(36, rng_(14))
    check_module_grad(enc, [rng_(15).normal(size=(2, 36))],
                      lambda m, ts: m(ts[0]), rtol=1e-4, label="cnn",
                      max_coords_per_param=6)


# ---------------------------------------------------------------------------
# FT-Transformer

def _toy_ft(layers=1, seed=16):
    # 2 numeric columns + one 3-category one-hot block, 8-dim tokens
    return encoders.FTTransformerEncoder(
        input_width=5, numeric_cols=[0, 1], cat_groups={"proto": [2, 3, 4]},
        rng=rng_(seed), token_dim=8, heads=2, layers=layers, dropout=0.0)


def _toy_batch(b=4, seed=17):
    rng = rng_(seed)
    num = rng.normal(size=(b, 2))
    hot = np.zeros((b, 3))
    hot[np.arange(b), rng.integers(0, 3, size=b)] = 1.0
    return np.hstack([num, hot])


def test_ft_representation_width():
    enc = _toy_ft()
    out = enc(Tensor(_toy_batch()))
    assert out.shape == (4, 3 * 8)
    cfg = encoders.EncoderConfig(kind="ft_transformer", input_width=58,
                                 numeric_cols=list(range(58)))
    assert encoders.representation_dim(cfg) == 1856


def test_ft_zero_numeric_tokens_equal_bias():
    enc = _toy_ft()
    x = _toy_batch()
    x[:, :2] = 0.0
    tokens = enc.tokenize(Tensor(x))
    for j in range(2):
        np.testing.assert_allclose(
            tokens.values[:, j, :], np.tile(enc.num_bias.values[j], (4, 1)))


def test_ft_categorical_lookup():
    enc = _toy_ft()
    x = np.zeros((3, 5))
    x[:, 0:2] = 1.0
    x[0, 2] = x[1, 3] = x[2, 4] = 1.0  # categories 0, 1, 2
    tokens = enc.tokenize(Tensor(x))
    np.testing.assert_allclose(tokens.values[:, 2, :], enc.embeddings[0].values)


def test_ft_out_of_range_index():
    enc = _toy_ft()
    with pytest.raises(SchemaError):
        enc.tokenize_indices(Tensor(np.zeros((2, 2))), [np.array([0, 3])])


def test_ft_eval_deterministic_with_dropout():
    enc = encoders.FTTransformerEncoder(
        input_width=5, numeric_cols=[0, 1], cat_groups={"g": [2, 3, 4]},
        rng=rng_(18), token_dim=8, heads=2, layers=2, dropout=0.5)
    enc.eval()
    x = Tensor(_toy_batch())
    np.testing.assert_array_equal(enc(x).values, enc(x).values)


def test_ft_grad_single_layer():
    enc = _toy_ft(layers=1, seed=19)
    check_module_grad(enc, [_toy_batch(b=3, seed=20)],
                      lambda m, ts: m(ts[0]), rtol=1e-4, label="ft",
                      max_coords_per_param=8, check_inputs=False)


def test_ft_all_numeric_fallback():
    enc = encoders.FTTransformerEncoder(
        input_width=4, numeric_cols=[], cat_groups={}, rng=rng_(21),
        token_dim=8, heads=2, layers=1, dropout=0.0)
    out = enc(Tensor(rng_(22).normal(size=(2, 4))))
    assert out.shape == (2, 32)


# ---------------------------------------------------------------------------
# shared contracts

def test_representation_dim_matches_encoders():
    cfg_mlp = encoders.EncoderConfig(kind="mlp", input_width=196)
    assert encoders.representation_dim(cfg_mlp) == 256
    cfg_cnn = encoders.EncoderConfig(kind="cnn", input_width=196)
    assert encoders.representation_dim(cfg_cnn) == 3584
    with pytest.raises(nn.ConfigError):
        encoders.representation_dim(encoders.EncoderConfig(kind="vae", input_width=5))


def test_build_encoder_dispatch_and_reproducibility():
    for kind in ("mlp", "cnn", "ft_transformer"):
        width = 36 if kind == "cnn" else 10
        cfg = encoders.EncoderConfig(kind=kind, input_width=width,
                                     numeric_cols=list(range(width)))
        e1 = encoders.build_encoder(cfg, rng_(23))
        e2 = encoders.build_encoder(cfg, rng_(23))
        s1, s2 = e1.state_dict(), e2.state_dict()
        assert sorted(s1) == sorted(s2)
        for key in s1:
            np.testing.assert_array_equal(s1[key], s2[key])


def test_encoders_finite_outputs():
    x = rng_(24).normal(size=(8, 36))
    for kind in ("mlp", "cnn", "ft_transformer"):
        cfg = encoders.EncoderConfig(kind=kind, input_width=36,
                                     numeric_cols=list(range(36)))
        enc = encoders.build_encoder(cfg, rng_(25))
        out = enc(Tensor(x)).values
        assert np.isfinite(out).all(), kind
