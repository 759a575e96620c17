# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Unit tests for the learnable Gabor filter banks.
"""
import math

import numpy as np
import pytest

from sacnet import tensor as T
from sacnet.gabor import (
    GaborBank,
    GaborParams,
    bank_forward,
    init_bank,
    inverse_softplus,
    kernel_grid,
    synthesize_kernel,
)
from sacnet.shared import EvenKernelSize
from tests.gradcheck import check_gradients


def test_inverse_softplus():
    """
    Ensure the stored raw value maps back to the requested positive value.
    """
    for value in (0.05, 1.0, 3.5, 40.0):
        assert np.logaddexp(0.0, inverse_softplus(value)) == pytest.approx(value, rel=1e-12)
    params = GaborParams(3.0, 0.2, 0.1, 1.5, 0.8)
    assert params.wavelength == pytest.approx(3.0)
    assert params.sigma == pytest.approx(1.5)
    assert params.gamma == pytest.approx(0.8)


def test_params_refuse_non_positive():
    """
    Ensure zero or negative wavelength, sigma and gamma are refused.
    """
    with pytest.raises(ValueError):
        GaborParams(0.0, 0.0, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        GaborParams(2.0, 0.0, 0.0, -1.0, 1.0)
    with pytest.raises(ValueError):
        GaborParams(2.0, 0.0, 0.0, 1.0, 0.0)


def test_params_stay_positive_under_any_raw_value():
    """
    Ensure a large negative raw value still gives a positive parameter.
    """
    params = GaborParams(2.0, 0.0, 0.0, 1.0, 1.0)
    params.lambda_raw.data[...] = -50.0
    params.sigma_raw.data[...] = -50.0
    assert params.wavelength > 0.0
    assert params.sigma > 0.0
    kernel = synthesize_kernel(params, 3).numpy()
    assert np.all(np.isfinite(kernel))


def test_kernel_grid():
    """
    Ensure offsets are centred, x runs along columns and even sizes fail.
    """
    x, y = kernel_grid(3)
    assert x.tolist() == [[-1.0, 0.0, 1.0]] * 3
    assert y[:, 0].tolist() == [-1.0, 0.0, 1.0]
    with pytest.raises(EvenKernelSize):
        kernel_grid(4)


def test_kernel_centre_and_symmetry():
    """
    Ensure a zero-phase kernel is 1 at its centre and symmetric under a
    half turn.
    """
    kernel = synthesize_kernel(GaborParams(4.0, 0.4, 0.0, 2.0, 0.7), 9).numpy()
    assert kernel.shape == (9, 9)
    assert kernel[4, 4] == pytest.approx(1.0)
    assert np.allclose(kernel, kernel[::-1, ::-1], atol=1e-14)


def test_kernel_half_turn_orientation():
    """
    Ensure orientations theta and theta + pi give the same zero-phase kernel.
    """
    a = synthesize_kernel(GaborParams(5.0, 0.3, 0.0, 2.0, 1.0), 7).numpy()
    b = synthesize_kernel(GaborParams(5.0, 0.3 + math.pi, 0.0, 2.0, 1.0), 7).numpy()
    assert np.allclose(a, b, atol=1e-12)


def test_kernel_matches_pointwise_formula():
    """
    Ensure the vectorised kernel equals the Gabor formula evaluated pixel
    by pixel for random parameters.
    """
    rng = np.random.default_rng(11)
    for _ in range(20):
        wavelength, sigma = rng.uniform(0.5, 10.0), rng.uniform(0.5, 8.0)
        gamma = rng.uniform(0.2, 2.0)
        theta, psi = rng.uniform(-math.pi, math.pi), rng.uniform(-math.pi, math.pi)
        kernel = synthesize_kernel(GaborParams(wavelength, theta, psi, sigma, gamma), 17).numpy()
        for row in range(17):
            for col in range(17):
                x, y = col - 8, row - 8
                x_rot = x * math.cos(theta) + y * math.sin(theta)
                y_rot = -x * math.sin(theta) + y * math.cos(theta)
                expected = math.exp(
                    -(x_rot ** 2 + gamma ** 2 * y_rot ** 2) / (2.0 * sigma ** 2)
                ) * math.cos(2.0 * math.pi * x_rot / wavelength + psi)
                assert abs(kernel[row, col] - expected) < 1e-12


def test_even_kernel_size_refused():
    """
    Ensure every entry point refuses even kernel sizes.
    """
    params = GaborParams(2.0, 0.0, 0.0, 1.0, 1.0)
    with pytest.raises(EvenKernelSize):
        synthesize_kernel(params, 6)
    with pytest.raises(EvenKernelSize):
        GaborBank(6, [params])
    with pytest.raises(EvenKernelSize):
        init_bank(8, 4, seed=0)


def test_init_bank_orientations():
    """
    Ensure a noise-free bank has evenly spaced orientations and the
    documented starting parameters.
    """
    bank = init_bank(7, 6, seed=3, noise=0.0)
    assert bank.n_orientations == 6
    for j, params in enumerate(bank.params):
        values = params.values()
        assert values["theta"] == pytest.approx(j * math.pi / 6)
        assert values["wavelength"] == pytest.approx(3.5)
        assert values["sigma"] == pytest.approx(1.75)
        assert values["gamma"] == pytest.approx(1.0)
        assert values["psi"] == 0.0


def test_init_bank_seeded_noise():
    """
    Ensure the jitter is bounded, reproducible from the seed and differs
    between seeds.
    """
    a = init_bank(5, 4, seed=1)
    b = init_bank(5, 4, seed=1)
    c = init_bank(5, 4, seed=2)
    assert np.array_equal(a.frozen_kernels(), b.frozen_kernels())
    assert not np.array_equal(a.frozen_kernels(), c.frozen_kernels())
    for j, params in enumerate(a.params[1:], start=1):
        theta = params.values()["theta"]
        assert abs(theta - j * math.pi / 4) <= 0.01 * j * math.pi / 4 + 1e-12


def test_init_bank_needs_orientations():
    """
    Ensure a bank without orientations is refused.
    """
    with pytest.raises(ValueError):
        init_bank(5, 0, seed=0)


def test_named_parameters():
    """
    Ensure every orientation contributes its five raw tensors under
    stable names.
    """
    bank = init_bank(3, 2, seed=0)
    names = [name for name, _ in bank.named_parameters("lgf1.")]
    assert names == [
        "lgf1.o0.lambda_raw", "lgf1.o0.theta", "lgf1.o0.psi", "lgf1.o0.sigma_raw",
        "lgf1.o0.gamma_raw", "lgf1.o1.lambda_raw", "lgf1.o1.theta", "lgf1.o1.psi",
        "lgf1.o1.sigma_raw", "lgf1.o1.gamma_raw",
    ]
    assert all(tensor.requires_grad for _, tensor in bank.named_parameters())


def test_kernel_gradients():
    """
    Ensure kernel synthesis passes the gradient check for all five raw
    parameters of every orientation.
    """
    bank = init_bank(5, 3, seed=4)
    bank.params[1].psi.data[...] = 0.3
    weights = np.random.default_rng(0).normal(size=(3, 1, 5, 5))
    tensors = [tensor for _, tensor in bank.named_parameters()]
    check_gradients(lambda: T.reduce_sum(bank.kernels() * weights), tensors,
                    eps=1e-5, tolerance=1e-5)


def test_bank_forward_shapes():
    """
    Ensure same-padding keeps the size at stride 1 and halves it (rounding
    up) at stride 2.
    """
    bank = init_bank(5, 4, seed=0)
    fm = T.FeatureMap(T.Tensor(np.random.default_rng(0).uniform(size=(2, 1, 15, 15))))
    out = bank_forward(bank, fm)
    assert out.shape == (2, 4, 15, 15)
    assert out.channel_semantics == "orientation"
    assert bank_forward(bank, fm, stride=2).shape == (2, 4, 8, 8)


def test_bank_forward_sums_input_channels():
    """
    Ensure a multi-channel input is filtered channel by channel and summed
    per orientation.
    """
    bank = init_bank(3, 2, seed=0)
    data = np.random.default_rng(1).normal(size=(1, 2, 6, 6))
    both = bank_forward(bank, T.FeatureMap(T.Tensor(data))).numpy()
    first = bank_forward(bank, T.FeatureMap(T.Tensor(data[:, :1]))).numpy()
    second = bank_forward(bank, T.FeatureMap(T.Tensor(data[:, 1:]))).numpy()
    assert np.allclose(both, first + second, atol=1e-12)
    loop = bank_forward(bank, T.FeatureMap(T.Tensor(data)), method="loop").numpy()
    assert np.allclose(both, loop, atol=1e-12)


def test_matched_orientation_responds_most():
    """
    Ensure a grating along orientation j excites filter j more than any
    other filter of a noise-free bank.
    """
    k = 17
    bank = init_bank(k, 6, seed=0, noise=0.0)
    kernels = bank.frozen_kernels()
    x, y = kernel_grid(k)
    for j in range(6):
        theta = j * math.pi / 6
        grating = np.cos(2.0 * math.pi * (x * math.cos(theta) + y * math.sin(theta)) / (k / 2.0))
        responses = [float(np.sum(kernel * grating)) for kernel in kernels]
        assert int(np.argmax(responses)) == j
