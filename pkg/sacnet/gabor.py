# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Learnable Gabor filter (LGF) banks.

A Gabor kernel is a Gaussian envelope modulating a cosine carrier::

    g(x, y) = exp(-(x'^2 + gamma^2 y'^2) / (2 sigma^2)) * cos(2 pi x' / lambda + psi)
    x' =  x cos(theta) + y sin(theta)
    y' = -x sin(theta) + y cos(theta)

with (x, y) the integer offsets from the kernel center. The wavelength,
standard deviation and aspect ratio must stay positive while they are
learned, so they are stored as raw values and mapped through softplus.
"""
import math

import numpy as np

from sacnet import tensor as T
from sacnet.logging import logger
from sacnet.shared import EvenKernelSize

#: Relative amplitude of the uniform noise added at initialisation.
INIT_NOISE = 0.01


def inverse_softplus(value):
    """
    :param float value: A strictly positive number.
    :return: The raw value whose softplus is ``value``.
    """
    return value + math.log(-math.expm1(-value))


class GaborParams:
    """
    The five learnable scalars of one Gabor filter.

    :param float wavelength: Lambda, in pixels (> 0).
    :param float theta: Orientation in radians.
    :param float psi: Phase in radians.
    :param float sigma: Gaussian standard deviation in pixels (> 0).
    :param float gamma: Spatial aspect ratio (> 0).
    """

    #: Names of the raw tensors, in a stable order.
    FIELDS = ("lambda_raw", "theta", "psi", "sigma_raw", "gamma_raw")

    def __init__(self, wavelength, theta, psi, sigma, gamma):
        for label, value in (("wavelength", wavelength), ("sigma", sigma), ("gamma", gamma)):
            if value <= 0:
                raise ValueError("Gabor {} must be positive, got {}".format(label, value))
        self.lambda_raw = T.parameter(inverse_softplus(wavelength))
        self.theta = T.parameter(theta)
        self.psi = T.parameter(psi)
        self.sigma_raw = T.parameter(inverse_softplus(sigma))
        self.gamma_raw = T.parameter(inverse_softplus(gamma))

    @property
    def wavelength(self):
        return float(np.logaddexp(0.0, self.lambda_raw.data))

    @property
    def sigma(self):
        return float(np.logaddexp(0.0, self.sigma_raw.data))

    @property
    def gamma(self):
        return float(np.logaddexp(0.0, self.gamma_raw.data))

    def tensors(self):
        """
        :return: ``(name, Tensor)`` pairs for the raw parameters.
        """
        return [(name, getattr(self, name)) for name in self.FIELDS]

    def values(self):
        """
        :return: The effective parameter values as a dictionary of floats.
        """
        return {
            "wavelength": self.wavelength,
            "theta": float(self.theta.data),
            "psi": float(self.psi.data),
            "sigma": self.sigma,
            "gamma": self.gamma,
        }

    def __repr__(self):
        return repr(self.values())


def kernel_grid(k):
    """
    Integer offsets of a ``k`` x ``k`` kernel around its center.

    :param int k: Odd kernel size.
    :return: ``(x, y)`` arrays; x runs along columns, y along rows.
    """
    if k < 1 or k % 2 == 0:
        raise EvenKernelSize("Gabor kernel size must be odd, got {}".format(k))
    half = (k - 1) // 2
    y, x = np.mgrid[-half : half + 1, -half : half + 1]
    return x.astype(np.float64), y.astype(np.float64)


def synthesize_kernel(params, k):
    """
    Build the ``k`` x ``k`` Gabor kernel of ``params`` inside the autodiff graph.

    :param GaborParams params: The filter parameters.
    :param int k: Odd kernel size.
    :return: A ``[k, k]`` Tensor differentiable w.r.t. all five raw parameters.
    :raises EvenKernelSize: When ``k`` is even.
    """
    x, y = kernel_grid(k)
    wavelength = T.softplus(params.lambda_raw)
    sigma = T.softplus(params.sigma_raw)
    gamma = T.softplus(params.gamma_raw)
    cos_t = T.cos(params.theta)
    sin_t = T.sin(params.theta)
    x_rot = T.add(T.mul(x, cos_t), T.mul(y, sin_t))
    y_rot = T.sub(T.mul(y, cos_t), T.mul(x, sin_t))
    spread = T.add(T.square(x_rot), T.mul(T.square(y_rot), T.square(gamma)))
    envelope = T.exp(T.neg(T.div(spread, T.scale(T.square(sigma), 2.0))))
    carrier = T.cos(T.add(T.div(T.scale(x_rot, 2.0 * math.pi), wavelength), params.psi))
    return T.mul(envelope, carrier)


class GaborBank:
    """
    ``n_orientations`` independently learnable Gabor filters of one size.

    :param int kernel_size: Odd kernel size k.
    :param list params: One GaborParams per orientation.
    """

    def __init__(self, kernel_size, params):
        if kernel_size % 2 == 0:
            raise EvenKernelSize("Gabor kernel size must be odd, got {}".format(kernel_size))
        if not params:
            raise ValueError("A Gabor bank needs at least one orientation")
        self.kernel_size = kernel_size
        self.params = list(params)

    @property
    def n_orientations(self):
        return len(self.params)

    def kernels(self):
        """
        :return: ``[n_orientations, 1, k, k]`` Tensor of synthesized kernels.
        """
        k = self.kernel_size
        return T.concat(
            [T.reshape(synthesize_kernel(p, k), (1, 1, k, k)) for p in self.params], axis=0
        )

    def frozen_kernels(self):
        """
        :return: The kernels as a plain ``[n_orientations, k, k]`` numpy array.
        """
        with T.no_grad():
            return self.kernels().data[:, 0].copy()

    def named_parameters(self, prefix=""):
        """
        :param str prefix: Prepended to every name.
        :return: ``(name, Tensor)`` pairs, orientation by orientation.
        """
        return [
            ("{}o{}.{}".format(prefix, index, name), tensor)
            for index, p in enumerate(self.params)
            for name, tensor in p.tensors()
        ]

    def __repr__(self):
        """
        Helps with log files.

        :return: A repr of a dictionary containing the bank's metadata.
        """
        return repr(
            {
                "kernel_size": self.kernel_size,
                "n_orientations": self.n_orientations,
                "thetas": [round(float(p.theta.data), 6) for p in self.params],
            }
        )


def init_bank(k, n_orientations, seed, noise=INIT_NOISE):
    """
    Create a bank with evenly spaced orientations ``j * pi / n_orientations``,
    wavelength ``k / 2``, sigma ``k / 4``, gamma 1 and phase 0, each value
    jittered by up to ``noise`` of itself.

    :param int k: Odd kernel size.
    :param int n_orientations: Number of filters, at least 1.
    :param int seed: Seed of the jitter.
    :param float noise: Relative jitter amplitude, 0 for an exact bank.
    :return: The new GaborBank.
    """
    if n_orientations < 1:
        raise ValueError("n_orientations must be >= 1, got {}".format(n_orientations))
    if k % 2 == 0:
        raise EvenKernelSize("Gabor kernel size must be odd, got {}".format(k))
    rng = np.random.default_rng(seed)
    params = []
    for j in range(n_orientations):
        base = (k / 2.0, j * math.pi / n_orientations, 0.0, k / 4.0, 1.0)
        jitter = 1.0 + rng.uniform(-noise, noise, size=len(base))
        wavelength, theta, psi, sigma, gamma = (v * f for v, f in zip(base, jitter))
        params.append(GaborParams(wavelength, theta, psi, sigma, gamma))
    bank = GaborBank(k, params)
    logger.info("Initialised Gabor bank %s", bank)
    return bank


def bank_forward(bank, feature_map, stride=1, method="im2col"):
    """
    Convolve every input channel with each orientation's kernel and sum per
    orientation, using same-padding ``(k - 1) / 2``.

    :param GaborBank bank: The filters.
    :param FeatureMap feature_map: ``[b, c, h, w]`` input.
    :param int stride: 1 keeps the spatial size, 2 halves it (rounding up).
    :param str method: conv2d method.
    :return: ``[b, n_orientations, h', w']`` FeatureMap of orientation channels.
    """
    k = bank.kernel_size
    kernels = bank.kernels()
    if feature_map.channels > 1:
        kernels = T.concat([kernels] * feature_map.channels, axis=1)
    out = T.conv2d(
        feature_map.tensor, kernels, stride=stride, padding=(k - 1) // 2, method=method
    )
    return T.FeatureMap(out, "orientation")
