# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
The three-branch scale-aware competitive network, its configuration and
its training loss.
"""
import math

import numpy as np
import toml

from sacnet import tensor as T
from sacnet.competition import ascm_forward, init_branch, iscm_forward
from sacnet.logging import logger
from sacnet.shared import (
    BRANCH_NAMES,
    ConfigError,
    ConfigMismatch,
    EmptyPairPlan,
    ShapeMismatch,
    read_config_file,
)

#: Added under the square root of pair distances so the gradient stays finite at 0.
DISTANCE_EPS = 1e-12


class ModelConfig:
    """
    Architecture and training hyperparameters.

    Every field has a default (the sizes used for 128x128 ROIs); keyword
    arguments override them. Unknown names raise ConfigError.
    """

    #: Field names and default values, in documentation order.
    DEFAULTS = {
        "branch_kernel_sizes": [7, 17, 35],
        "use_branches": [True, True, True],
        "n_orientations": 6,
        "input_hw": 128,
        "second_stride": 2,
        "msa_heads": 2,
        "msa_embed_dim": 8,
        "msa_positional": False,
        "embedding_dim": 128,
        "n_classes": 10,
        "use_iscm": True,
        "use_ascm": True,
        "ascm_grouped": False,
        "softmax_temperature": 1.0,
        "w_ce": 1.0,
        "w_con": 1.0,
        "margin": 0.5,
        "lr": 0.0003,
        "batch_size": 16,
        "epochs": 10,
        "seed": 0,
        "conv_method": "im2col",
    }

    def __init__(self, **values):
        for key in values:
            if key not in self.DEFAULTS:
                raise ConfigError("Unknown config key '{}'".format(key))
        for key, default in self.DEFAULTS.items():
            value = values.get(key, default)
            setattr(self, key, list(value) if isinstance(value, list) else value)
        self.validate()

    @classmethod
    def from_file(cls, path):
        """
        :param str path: A flat ``key = value`` config file.
        :return: The ModelConfig it describes.
        :raises ConfigError: On unknown keys or invalid values.
        """
        values = read_config_file(path, cls.DEFAULTS)
        try:
            return cls(**values)
        except ConfigError as ex:
            raise ConfigError("{} ({})".format(ex, path)) from ex

    @classmethod
    def from_text(cls, text):
        """
        :param str text: Canonical text as written by :meth:`to_text`.
        """
        try:
            values = toml.loads(text)
        except toml.TomlDecodeError as ex:
            raise ConfigError("Could not parse config text: {}".format(ex)) from ex
        return cls(**values)

    def as_dict(self):
        return {key: getattr(self, key) for key in self.DEFAULTS}

    def to_text(self):
        """
        :return: Key-sorted ``key = value`` text, identical for equal configs.
        """
        return toml.dumps(dict(sorted(self.as_dict().items())))

    def replace(self, **changes):
        """
        :return: A copy with ``changes`` applied.
        """
        values = self.as_dict()
        values.update(changes)
        return ModelConfig(**values)

    def validate(self):
        """
        :raises ConfigError: When a field has the wrong type or breaks an invariant.
        """
        for key in ("branch_kernel_sizes", "use_branches"):
            if not isinstance(getattr(self, key), list):
                raise ConfigError("{} must be a list, got {!r}".format(key, getattr(self, key)))
        if not all(isinstance(flag, bool) for flag in self.use_branches):
            raise ConfigError("use_branches must hold booleans, got {!r}".format(
                self.use_branches))
        for key in ("msa_positional", "use_iscm", "use_ascm", "ascm_grouped"):
            if not isinstance(getattr(self, key), bool):
                raise ConfigError("{} must be true or false, got {!r}".format(
                    key, getattr(self, key)))
        for key in ("softmax_temperature", "w_ce", "w_con", "margin", "lr"):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError("{} must be a number, got {!r}".format(key, value))
        for key in ("batch_size", "seed"):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError("{} must be a non-negative integer, got {!r}".format(
                    key, value))
        sizes = self.branch_kernel_sizes
        if len(sizes) != len(BRANCH_NAMES) or not all(
            isinstance(k, int) and not isinstance(k, bool) for k in sizes
        ):
            raise ConfigError("branch_kernel_sizes needs three integers, got {}".format(sizes))
        if any(k < 1 or k % 2 == 0 for k in sizes):
            raise ConfigError("branch_kernel_sizes must be odd, got {}".format(sizes))
        if any(a >= b for a, b in zip(sizes, sizes[1:])):
            raise ConfigError("branch_kernel_sizes must increase strictly, got {}".format(sizes))
        if len(self.use_branches) != len(BRANCH_NAMES) or not any(self.use_branches):
            raise ConfigError(
                "use_branches needs three flags with at least one set, got {}".format(
                    self.use_branches
                )
            )
        for key in ("n_orientations", "input_hw", "second_stride", "msa_heads",
                    "msa_embed_dim", "embedding_dim", "n_classes", "epochs"):
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError("{} must be a positive integer, got {!r}".format(key, value))
        if self.msa_embed_dim % self.msa_heads:
            raise ConfigError(
                "msa_embed_dim {} is not divisible by msa_heads {}".format(
                    self.msa_embed_dim, self.msa_heads
                )
            )
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be an even number >= 2, got {}".format(
                self.batch_size))
        if self.lr <= 0:
            raise ConfigError("lr must be positive, got {}".format(self.lr))
        if self.w_ce < 0 or self.w_con < 0 or self.w_ce + self.w_con <= 0:
            raise ConfigError(
                "Loss weights must be >= 0 with a positive sum, got w_ce={} w_con={}".format(
                    self.w_ce, self.w_con
                )
            )
        if self.margin <= 0:
            raise ConfigError("margin must be positive, got {}".format(self.margin))
        if self.softmax_temperature <= 0:
            raise ConfigError(
                "softmax_temperature must be positive, got {}".format(self.softmax_temperature)
            )
        if self.conv_method not in ("im2col", "loop"):
            raise ConfigError("conv_method must be im2col or loop, got {!r}".format(
                self.conv_method))
        if max(sizes) > self.input_hw:
            raise ConfigError("Kernel size {} exceeds input_hw {}".format(max(sizes),
                                                                           self.input_hw))

    @property
    def active_branches(self):
        """
        :return: ``(name, kernel_size)`` of the enabled branches, tiny to large.
        """
        return [
            (name, k)
            for name, k, used in zip(BRANCH_NAMES, self.branch_kernel_sizes, self.use_branches)
            if used
        ]

    @property
    def token_hw(self):
        """
        :return: Spatial size of the maps after the second Gabor layer.
        """
        return -(-self.input_hw // self.second_stride)

    def __eq__(self, other):
        return isinstance(other, ModelConfig) and self.as_dict() == other.as_dict()

    def __repr__(self):
        return repr(self.as_dict())


def _uniform(rng, fan_in, *shape):
    bound = 1.0 / math.sqrt(fan_in)
    return T.parameter(rng.uniform(-bound, bound, size=shape))


class SacNet:
    """
    Branches of increasing kernel size, inner- and across-scale
    competition, and a pooled linear head producing a unit-length embedding
    and class logits.

    :param ModelConfig cfg: The architecture; disabled branches are not built.
    """

    def __init__(self, cfg):
        cfg.validate()
        self.cfg = cfg
        self.branches = {}
        for index, (name, k) in enumerate(cfg.active_branches):
            self.branches[name] = init_branch(
                k,
                cfg.n_orientations,
                cfg.msa_heads,
                cfg.msa_embed_dim,
                seed=cfg.seed + 10 * (BRANCH_NAMES.index(name) + 1),
                positional=cfg.msa_positional,
                second_stride=cfg.second_stride,
            )
        # pooled F_across plus one pooled F_inner per branch
        n_features = 2 * len(self.branches) * cfg.n_orientations
        rng = np.random.default_rng(cfg.seed + 100)
        self.w_embed = _uniform(rng, n_features, n_features, cfg.embedding_dim)
        self.b_embed = _uniform(rng, n_features, cfg.embedding_dim)
        self.w_cls = _uniform(rng, cfg.embedding_dim, cfg.embedding_dim, cfg.n_classes)
        self.b_cls = _uniform(rng, cfg.embedding_dim, cfg.n_classes)
        logger.info("Built SacNet with %s parameters: %s", self.parameter_count(), cfg)

    def named_parameters(self):
        """
        :return: Ordered ``(name, Tensor)`` pairs, each leaf listed once.
        """
        named = []
        for name, branch in self.branches.items():
            named.extend(branch.named_parameters(name + "."))
        named.extend(
            [
                ("head.w_embed", self.w_embed),
                ("head.b_embed", self.b_embed),
                ("head.w_cls", self.w_cls),
                ("head.b_cls", self.b_cls),
            ]
        )
        if len({id(t) for _, t in named}) != len(named):
            raise RuntimeError("A learnable tensor is registered twice")
        return named

    def parameters(self):
        return [tensor for _, tensor in self.named_parameters()]

    def parameter_count(self):
        return sum(tensor.size for tensor in self.parameters())

    def zero_grad(self):
        for tensor in self.parameters():
            tensor.zero_grad()

    def embed(self, images, batch_size=32):
        """
        Embeddings of ``images`` without recording a graph.

        :param images: ``[n, 1, h, w]`` array in ``[0, 1]``.
        :param int batch_size: Images per forward pass.
        :return: ``[n, embedding_dim]`` numpy array of unit rows.
        """
        images = np.asarray(images, dtype=np.float64)
        rows = []
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                embeddings, _ = forward(self, images[start : start + batch_size])
                rows.append(embeddings.data)
        if not rows:
            return np.zeros((0, self.cfg.embedding_dim))
        return np.concatenate(rows, axis=0)

    def __repr__(self):
        return repr(
            {
                "branches": {name: b.kernel_size for name, b in self.branches.items()},
                "parameters": self.parameter_count(),
            }
        )


def _global_pool(feature_map):
    return T.reduce_mean(feature_map.tensor, axis=(2, 3))


def _l2_normalize_rows(x):
    norms = T.sqrt(T.reduce_sum(T.square(x), axis=1))
    # trailing-axis broadcasting: divide the columns of x^T by the row norms
    return T.transpose(T.div(T.transpose(x), norms))


def forward(model, batch):
    """
    :param SacNet model: The network.
    :param batch: ``[b, 1, h, w]`` FeatureMap, Tensor or array in ``[0, 1]``.
    :return: ``(embeddings [b, d] unit rows, logits [b, n_classes])``.
    :raises ConfigMismatch: When the batch size disagrees with ``input_hw``.
    """
    cfg = model.cfg
    if not isinstance(batch, T.FeatureMap):
        batch = T.FeatureMap(T.as_tensor(batch), "generic")
    if batch.channels != 1 or batch.spatial != (cfg.input_hw, cfg.input_hw):
        raise ConfigMismatch(
            "Expected [b, 1, {0}, {0}] input, got {1}".format(cfg.input_hw, batch.shape)
        )
    f_msas, f_inners = [], []
    for branch in model.branches.values():
        f_msa, f_inner = iscm_forward(branch, batch, temperature=cfg.softmax_temperature,
                                     method=cfg.conv_method)
        f_msas.append(f_msa)
        f_inners.append(f_inner if cfg.use_iscm else f_msa)
    if cfg.use_ascm:
        f_across = ascm_forward(
            *f_msas, grouped=cfg.ascm_grouped, temperature=cfg.softmax_temperature
        )
    else:
        f_across = T.FeatureMap(T.concat([f.tensor for f in f_msas], axis=1), "scale_group")
    pooled = T.concat([_global_pool(f_across)] + [_global_pool(f) for f in f_inners], axis=1)
    raw = T.add(T.matmul(pooled, model.w_embed), model.b_embed)
    logits = T.add(T.matmul(raw, model.w_cls), model.b_cls)
    return _l2_normalize_rows(raw), logits


def loss_terms(cfg, embeddings, logits, labels, pair_plan):
    """
    Cross-entropy and contrastive terms of the training loss.

    :param ModelConfig cfg: Supplies ``w_ce``, ``w_con`` and ``margin``.
    :param Tensor embeddings: ``[b, d]`` unit rows.
    :param Tensor logits: ``[b, n_classes]``.
    :param labels: ``b`` integer class indices.
    :param pair_plan: ``(i, j, same)`` triples of batch indices.
    :return: ``(total, ce, contrastive)`` scalar Tensors.
    :raises EmptyPairPlan: When ``w_con > 0`` and no pairs are planned.
    """
    labels = np.asarray(labels, dtype=np.int64)
    batch, n_classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeMismatch("Expected {} labels, got shape {}".format(batch, labels.shape))
    log_probs = T.reshape(T.log_softmax(logits, axis=1), (batch * n_classes,))
    picked = T.take(log_probs, np.arange(batch) * n_classes + labels)
    ce = T.neg(T.reduce_mean(picked))

    pair_plan = list(pair_plan)
    if pair_plan:
        first = [i for i, _, _ in pair_plan]
        second = [j for _, j, _ in pair_plan]
        same = np.array([1.0 if s else 0.0 for _, _, s in pair_plan])
        delta = T.sub(T.take(embeddings, first, axis=0), T.take(embeddings, second, axis=0))
        squared = T.reduce_sum(T.square(delta), axis=1)
        distance = T.sqrt(T.add(squared, DISTANCE_EPS))
        hinge = T.square(T.relu(T.sub(cfg.margin, distance)))
        per_pair = T.add(T.mul(squared, same), T.mul(hinge, 1.0 - same))
        contrastive = T.reduce_mean(per_pair)
    elif cfg.w_con > 0:
        raise EmptyPairPlan("The contrastive term is weighted {} but no pairs were given".format(
            cfg.w_con))
    else:
        contrastive = T.Tensor(0.0)
    total = T.add(T.scale(ce, cfg.w_ce), T.scale(contrastive, cfg.w_con))
    return total, ce, contrastive


def loss(cfg, embeddings, logits, labels, pair_plan):
    """
    ``w_ce * CE + w_con * mean over pairs of (d^2 | max(0, m - d)^2)``.

    :return: The scalar loss Tensor.
    """
    return loss_terms(cfg, embeddings, logits, labels, pair_plan)[0]
