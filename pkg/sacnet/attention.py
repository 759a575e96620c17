# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Multi-head self-attention (MSA) over the spatial positions of a feature map.

Every pixel of a ``[b, c, h, w]`` map becomes a token whose embedding is
its ``c`` channel values. Each head computes
``softmax(Q K^T / sqrt(head_dim)) V``; heads are concatenated, projected,
added back to the tokens and layer-normalized over the channel axis.
"""
import math

import numpy as np

from sacnet import tensor as T
from sacnet.logging import logger
from sacnet.shared import ShapeMismatch


class MsaConfig:
    """
    Dimensions of one attention block.

    :param int n_heads: Number of heads.
    :param int embed_dim: Channel count seen by attention; divisible by ``n_heads``.
    :param int in_channels: Channels of the incoming map. When it differs from
        ``embed_dim`` a 1x1 lift precedes attention and a 1x1 drop follows.
    :param bool positional: Add a fixed sinusoidal encoding to the tokens.
    """

    def __init__(self, n_heads, embed_dim, in_channels=None, positional=False):
        if n_heads < 1 or embed_dim < 1:
            raise ValueError(
                "MSA dimensions must be >= 1, got n_heads={} embed_dim={}".format(
                    n_heads, embed_dim
                )
            )
        if embed_dim % n_heads:
            raise ValueError(
                "embed_dim {} is not divisible by n_heads {}".format(embed_dim, n_heads)
            )
        self.n_heads = n_heads
        self.embed_dim = embed_dim
        self.in_channels = embed_dim if in_channels is None else in_channels
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1, got {}".format(self.in_channels))
        self.positional = bool(positional)

    @property
    def head_dim(self):
        return self.embed_dim // self.n_heads

    @property
    def lifted(self):
        """
        :return: True when 1x1 channel lift/drop convolutions are needed.
        """
        return self.in_channels != self.embed_dim

    def __repr__(self):
        return repr(
            {
                "n_heads": self.n_heads,
                "embed_dim": self.embed_dim,
                "in_channels": self.in_channels,
                "positional": self.positional,
            }
        )


class MsaWeights:
    """
    Learnable tensors of one attention block.

    ``wq``, ``wk`` and ``wv`` hold one ``[embed_dim, head_dim]`` matrix per
    head, ``wo`` is the ``[embed_dim, embed_dim]`` output projection. ``lift``
    (``[embed_dim, in_channels, 1, 1]``) and ``drop``
    (``[in_channels, embed_dim, 1, 1]``) are None unless the config is lifted.
    """

    def __init__(self, wq, wk, wv, wo, lift=None, drop=None):
        if not len(wq) == len(wk) == len(wv):
            raise ShapeMismatch("Query, key and value need one matrix per head each")
        self.wq = list(wq)
        self.wk = list(wk)
        self.wv = list(wv)
        self.wo = wo
        self.lift = lift
        self.drop = drop

    def check(self, cfg):
        """
        :param MsaConfig cfg: The dimensions these weights must follow.
        :raises ShapeMismatch: On any inconsistent projection shape.
        """
        expected = (cfg.embed_dim, cfg.head_dim)
        if len(self.wq) != cfg.n_heads:
            raise ShapeMismatch(
                "Expected {} heads, weights hold {}".format(cfg.n_heads, len(self.wq))
            )
        for w in self.wq + self.wk + self.wv:
            if w.shape != expected:
                raise ShapeMismatch("Head projection {} != {}".format(w.shape, expected))
        if self.wo.shape != (cfg.embed_dim, cfg.embed_dim):
            raise ShapeMismatch("Output projection has shape {}".format(self.wo.shape))
        if cfg.lifted != (self.lift is not None and self.drop is not None):
            raise ShapeMismatch("Channel lift weights do not match in_channels")

    def named_parameters(self, prefix=""):
        """
        :param str prefix: Prepended to every name.
        :return: ``(name, Tensor)`` pairs in a stable order.
        """
        named = []
        for index, (q, k, v) in enumerate(zip(self.wq, self.wk, self.wv)):
            named.extend(
                [
                    ("{}h{}.wq".format(prefix, index), q),
                    ("{}h{}.wk".format(prefix, index), k),
                    ("{}h{}.wv".format(prefix, index), v),
                ]
            )
        named.append(("{}wo".format(prefix), self.wo))
        if self.lift is not None:
            named.append(("{}lift".format(prefix), self.lift))
            named.append(("{}drop".format(prefix), self.drop))
        return named


def init_msa(cfg, seed):
    """
    Draw every weight uniformly in ``+-1 / sqrt(embed_dim)``.

    :param MsaConfig cfg: The block dimensions.
    :param int seed: Seed of the draw.
    :return: The new MsaWeights.
    """
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(cfg.embed_dim)

    def draw(*shape):
        return T.parameter(rng.uniform(-bound, bound, size=shape))

    heads = range(cfg.n_heads)
    wq = [draw(cfg.embed_dim, cfg.head_dim) for _ in heads]
    wk = [draw(cfg.embed_dim, cfg.head_dim) for _ in heads]
    wv = [draw(cfg.embed_dim, cfg.head_dim) for _ in heads]
    wo = draw(cfg.embed_dim, cfg.embed_dim)
    lift = drop = None
    if cfg.lifted:
        lift = draw(cfg.embed_dim, cfg.in_channels, 1, 1)
        drop = draw(cfg.in_channels, cfg.embed_dim, 1, 1)
    logger.info("Initialised MSA block %s", cfg)
    return MsaWeights(wq, wk, wv, wo, lift=lift, drop=drop)


def positional_encoding(n_tokens, embed_dim):
    """
    Sinusoidal encoding of the flattened token index.

    :return: ``[n_tokens, embed_dim]`` numpy array.
    """
    position = np.arange(n_tokens, dtype=np.float64)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, embed_dim, 2) / embed_dim))
    encoding = np.zeros((n_tokens, embed_dim))
    encoding[:, 0::2] = np.sin(position * rate)
    encoding[:, 1::2] = np.cos(position * rate[: embed_dim // 2])
    return encoding


def _tokens(x):
    batch, channels, height, width = x.shape
    return T.transpose(T.reshape(x, (batch, channels, height * width)), (0, 2, 1))


def _attend(cfg, w, tokens):
    """
    Run every head on ``[b, n, embed_dim]`` tokens.

    :return: ``(concatenated head outputs, [per-head attention Tensors])``.
    """
    queries = tokens
    if cfg.positional:
        queries = T.add(tokens, positional_encoding(tokens.shape[1], cfg.embed_dim))
    factor = 1.0 / math.sqrt(cfg.head_dim)
    outputs, weights = [], []
    for wq, wk, wv in zip(w.wq, w.wk, w.wv):
        q = T.matmul(queries, wq)
        k = T.matmul(queries, wk)
        v = T.matmul(queries, wv)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), factor)
        attention = T.softmax(scores, axis=-1)
        weights.append(attention)
        outputs.append(T.matmul(attention, v))
    return T.concat(outputs, axis=-1), weights


def _enter(cfg, w, feature_map):
    if feature_map.channels != cfg.in_channels:
        raise ShapeMismatch(
            "MSA expects {} channels, feature map has {}".format(
                cfg.in_channels, feature_map.channels
            )
        )
    w.check(cfg)
    x = feature_map.tensor
    if cfg.lifted:
        x = T.conv2d(x, w.lift)
    return x


def attention_weights(cfg, w, feature_map):
    """
    :return: One ``[b, h*w, h*w]`` numpy array of attention weights per head.
    """
    with T.no_grad():
        _, weights = _attend(cfg, w, _tokens(_enter(cfg, w, feature_map)))
    return [a.data for a in weights]


def msa_forward(cfg, w, feature_map):
    """
    Attend over spatial tokens, add the residual and layer-normalize over
    channels.

    :param MsaConfig cfg: Block dimensions.
    :param MsaWeights w: Block weights.
    :param FeatureMap feature_map: ``[b, in_channels, h, w]`` input.
    :return: FeatureMap with the input's shape and channel semantics.
    :raises ShapeMismatch: When the channel count disagrees with the config.
    """
    x = _enter(cfg, w, feature_map)
    batch, channels, height, width = x.shape
    tokens = _tokens(x)
    heads, _ = _attend(cfg, w, tokens)
    mixed = T.add(tokens, T.matmul(heads, w.wo))
    normed = T.layer_normalize(mixed, axis=-1)
    out = T.reshape(T.transpose(normed, (0, 2, 1)), (batch, channels, height, width))
    if cfg.lifted:
        out = T.conv2d(out, w.drop)
    return T.FeatureMap(out, feature_map.channel_semantics)
