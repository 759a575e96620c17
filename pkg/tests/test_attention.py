# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Unit tests for multi-head self-attention over feature map pixels.
"""
import numpy as np
import pytest

from sacnet import tensor as T
from sacnet.attention import (
    MsaConfig,
    MsaWeights,
    attention_weights,
    init_msa,
    msa_forward,
    positional_encoding,
)
from sacnet.shared import ShapeMismatch
from tests.gradcheck import check_gradients


def feature_map(shape, seed=0, semantics="orientation"):
    data = np.random.default_rng(seed).normal(size=shape)
    return T.FeatureMap(T.Tensor(data), semantics)


def test_config_dimensions():
    """
    Ensure head size is derived and inconsistent dimensions are refused.
    """
    cfg = MsaConfig(2, 8, in_channels=6)
    assert cfg.head_dim == 4
    assert cfg.lifted
    assert not MsaConfig(2, 8).lifted
    with pytest.raises(ValueError):
        MsaConfig(4, 6)
    with pytest.raises(ValueError):
        MsaConfig(0, 4)


def test_init_is_seeded_and_bounded():
    """
    Ensure initial weights depend only on the seed and respect the bound.
    """
    cfg = MsaConfig(2, 4, in_channels=3)
    a = init_msa(cfg, seed=5)
    b = init_msa(cfg, seed=5)
    for (name_a, ta), (name_b, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert name_a == name_b
        assert np.array_equal(ta.data, tb.data)
        assert np.all(np.abs(ta.data) <= 0.5)
    assert [name for name, _ in a.named_parameters("msa.")] == [
        "msa.h0.wq", "msa.h0.wk", "msa.h0.wv", "msa.h1.wq", "msa.h1.wk", "msa.h1.wv",
        "msa.wo", "msa.lift", "msa.drop",
    ]


def test_weights_check():
    """
    Ensure weights that disagree with the config are refused.
    """
    cfg = MsaConfig(2, 4)
    weights = init_msa(cfg, seed=0)
    weights.check(cfg)
    with pytest.raises(ShapeMismatch):
        weights.check(MsaConfig(1, 4))
    with pytest.raises(ShapeMismatch):
        weights.check(MsaConfig(2, 4, in_channels=3))
    with pytest.raises(ShapeMismatch):
        MsaWeights(weights.wq, weights.wk[:1], weights.wv, weights.wo)


def test_forward_keeps_shape_and_semantics():
    """
    Ensure the output has the input's shape and channel semantics, with and
    without a channel lift.
    """
    fm = feature_map((2, 6, 4, 5))
    for cfg in (MsaConfig(2, 6, in_channels=6), MsaConfig(2, 4, in_channels=6)):
        out = msa_forward(cfg, init_msa(cfg, seed=1), fm)
        assert out.shape == (2, 6, 4, 5)
        assert out.channel_semantics == "orientation"


def test_forward_channel_mismatch():
    """
    Ensure a map with the wrong channel count is refused.
    """
    cfg = MsaConfig(2, 4)
    with pytest.raises(ShapeMismatch):
        msa_forward(cfg, init_msa(cfg, seed=0), feature_map((1, 3, 4, 4)))


def test_forward_is_layer_normalised():
    """
    Ensure every pixel's channels have zero mean and unit variance.
    """
    cfg = MsaConfig(2, 6)
    out = msa_forward(cfg, init_msa(cfg, seed=2), feature_map((2, 6, 3, 3))).numpy()
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(out.var(axis=1), 1.0, atol=1e-3)


def test_zero_output_projection_normalises_input():
    """
    Ensure with a zero output projection only the residual remains.
    """
    cfg = MsaConfig(2, 4)
    weights = init_msa(cfg, seed=3)
    weights.wo.data[...] = 0.0
    fm = feature_map((1, 4, 3, 3), seed=4)
    out = msa_forward(cfg, weights, fm).numpy()
    data = fm.numpy()
    centred = data - data.mean(axis=1, keepdims=True)
    expected = centred / np.sqrt((centred ** 2).mean(axis=1, keepdims=True) + 1e-5)
    assert np.allclose(out, expected, atol=1e-12)


def test_attention_rows_are_distributions():
    """
    Ensure each head's attention matrix is row-stochastic over all pixels.
    """
    cfg = MsaConfig(2, 4)
    weights = attention_weights(cfg, init_msa(cfg, seed=0), feature_map((2, 4, 3, 4)))
    assert len(weights) == 2
    for head in weights:
        assert head.shape == (2, 12, 12)
        assert np.all(head >= 0.0)
        assert np.allclose(head.sum(axis=-1), 1.0, atol=1e-12)


def test_zero_queries_attend_uniformly():
    """
    Ensure zero query and key projections spread attention evenly.
    """
    cfg = MsaConfig(2, 4)
    weights = init_msa(cfg, seed=1)
    for tensor in weights.wq + weights.wk:
        tensor.data[...] = 0.0
    for head in attention_weights(cfg, weights, feature_map((1, 4, 3, 3), seed=2)):
        assert np.allclose(head, 1.0 / 9.0, atol=1e-15)


def test_permutation_equivariance():
    """
    Ensure that without positional encoding, swapping the spatial axes of
    the input swaps them in the output, and that the encoding breaks this.
    """
    fm = feature_map((1, 4, 4, 4), seed=6)
    swapped = T.FeatureMap(T.Tensor(fm.numpy().transpose(0, 1, 3, 2).copy()), "orientation")
    cfg = MsaConfig(2, 4)
    weights = init_msa(cfg, seed=7)
    out = msa_forward(cfg, weights, fm).numpy()
    out_swapped = msa_forward(cfg, weights, swapped).numpy()
    assert np.allclose(out.transpose(0, 1, 3, 2), out_swapped, atol=1e-9)
    positional = MsaConfig(2, 4, positional=True)
    out = msa_forward(positional, weights, fm).numpy()
    out_swapped = msa_forward(positional, weights, swapped).numpy()
    assert not np.allclose(out.transpose(0, 1, 3, 2), out_swapped, atol=1e-6)


def test_positional_encoding():
    """
    Ensure the encoding starts with alternating sin(0) and cos(0).
    """
    encoding = positional_encoding(5, 4)
    assert encoding.shape == (5, 4)
    assert encoding[0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert positional_encoding(3, 5).shape == (3, 5)


def test_msa_gradients():
    """
    Ensure the lifted block passes the gradient check on its input and
    every weight.
    """
    cfg = MsaConfig(2, 4, in_channels=3, positional=True)
    weights = init_msa(cfg, seed=8)
    x = T.parameter(np.random.default_rng(9).normal(size=(2, 3, 2, 3)))
    target = np.random.default_rng(10).normal(size=(2, 3, 2, 3))
    tensors = [x] + [tensor for _, tensor in weights.named_parameters()]

    def loss():
        out = msa_forward(cfg, weights, T.FeatureMap(x))
        return T.reduce_sum(out.tensor * target)

    check_gradients(loss, tensors, eps=1e-5, tolerance=1e-4)
