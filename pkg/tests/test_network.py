# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Unit tests for the model configuration, the network forward pass and the
training loss.
"""
import math
import os

import numpy as np
import pytest

from sacnet import tensor as T
from sacnet.network import ModelConfig, SacNet, forward, loss, loss_terms
from sacnet.shared import (
    DEFAULT_CONFIG_FILE,
    DESK_CONFIG_FILE,
    TOY_CONFIG_FILE,
    ConfigError,
    ConfigMismatch,
    EmptyPairPlan,
)
from tests.gradcheck import check_gradients

HERE = os.path.abspath(os.path.dirname(__file__))

TINY = dict(
    branch_kernel_sizes=[3, 5, 7],
    n_orientations=4,
    input_hw=12,
    msa_heads=2,
    msa_embed_dim=4,
    embedding_dim=8,
    n_classes=3,
    batch_size=4,
)


def images(n, size, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 1, size, size))


def test_config_defaults():
    """
    Ensure the defaults describe the full-size three-branch network.
    """
    cfg = ModelConfig()
    assert cfg.branch_kernel_sizes == [7, 17, 35]
    assert cfg.n_orientations == 6
    assert cfg.input_hw == 128
    assert [name for name, _ in cfg.active_branches] == ["ts", "ms", "ls"]
    assert cfg.token_hw == 64
    assert ModelConfig.from_file(str(DEFAULT_CONFIG_FILE)) == cfg


def test_config_toy_file():
    """
    Ensure the packaged toy and desk configs load with small kernels.
    """
    cfg = ModelConfig.from_file(str(TOY_CONFIG_FILE))
    assert cfg.input_hw == 32
    assert cfg.branch_kernel_sizes == [3, 7, 11]
    desk = ModelConfig.from_file(str(DESK_CONFIG_FILE))
    assert (desk.input_hw, desk.n_classes, desk.epochs) == (64, 10, 30)
    assert desk.branch_kernel_sizes == [3, 7, 11]


@pytest.mark.parametrize(
    "changes",
    [
        {"branch_kernel_sizes": [7, 16, 35]},
        {"branch_kernel_sizes": [17, 7, 35]},
        {"branch_kernel_sizes": [7, 17]},
        {"use_branches": [False, False, False]},
        {"batch_size": 7},
        {"batch_size": 0},
        {"msa_embed_dim": 6, "msa_heads": 4},
        {"lr": 0.0},
        {"w_ce": 0.0, "w_con": 0.0},
        {"margin": -1.0},
        {"softmax_temperature": 0.0},
        {"conv_method": "fft"},
        {"n_orientations": 0},
        {"input_hw": 16, "branch_kernel_sizes": [7, 17, 35]},
        {"lr": "fast"},
        {"margin": "wide"},
        {"w_con": [1.0]},
        {"softmax_temperature": "hot"},
        {"batch_size": 4.0},
        {"seed": -1},
        {"use_iscm": "yes"},
        {"ascm_grouped": 1},
        {"use_branches": [1, 1, 1]},
        {"branch_kernel_sizes": 7},
        {"branch_kernel_sizes": [True, 5, 7]},
    ],
)
def test_config_invalid(changes):
    """
    Ensure invalid values and values of the wrong type are refused with
    ConfigError.
    """
    with pytest.raises(ConfigError):
        ModelConfig(**changes)


def test_config_unknown_key(tmp_path):
    """
    Ensure unknown keys are refused both as arguments and in files.
    """
    with pytest.raises(ConfigError):
        ModelConfig(learning_rate=0.1)
    path = tmp_path / "bad.conf"
    path.write_text("learning_rate = 0.1\n")
    with pytest.raises(ConfigError):
        ModelConfig.from_file(str(path))
    with pytest.raises(ConfigError):
        ModelConfig.from_file(os.path.join(HERE, "bad_key.conf"))


def test_config_text_is_canonical():
    """
    Ensure equal configs give identical text that parses back to them.
    """
    a = ModelConfig(**TINY)
    b = ModelConfig(**dict(reversed(list(TINY.items()))))
    assert a.to_text() == b.to_text()
    assert ModelConfig.from_text(a.to_text()) == a
    with pytest.raises(ConfigError):
        ModelConfig.from_text("input_hw = = 3")


def test_config_replace():
    """
    Ensure replace copies the config with the changes applied.
    """
    cfg = ModelConfig(**TINY)
    other = cfg.replace(use_iscm=False)
    assert not other.use_iscm
    assert cfg.use_iscm
    assert other.branch_kernel_sizes == cfg.branch_kernel_sizes
    assert other.branch_kernel_sizes is not cfg.branch_kernel_sizes


def test_model_is_seeded():
    """
    Ensure two models built from one config hold identical parameters and
    that branches do not share initial weights.
    """
    cfg = ModelConfig(**TINY)
    a, b = SacNet(cfg), SacNet(cfg)
    for (name_a, ta), (name_b, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert name_a == name_b
        assert np.array_equal(ta.data, tb.data)
    assert not np.array_equal(
        a.branches["ts"].msa_weights.wo.data, a.branches["ms"].msa_weights.wo.data
    )


def test_forward_shapes_and_norms():
    """
    Ensure embeddings are unit rows and logits have one column per class.
    """
    model = SacNet(ModelConfig(**TINY))
    embeddings, logits = forward(model, images(3, 12))
    assert embeddings.shape == (3, 8)
    assert logits.shape == (3, 3)
    assert np.allclose(np.linalg.norm(embeddings.numpy(), axis=1), 1.0, atol=1e-12)


def test_forward_rows_are_independent():
    """
    Ensure identical images give identical rows and an image's embedding
    does not depend on the rest of the batch.
    """
    model = SacNet(ModelConfig(**TINY))
    batch = images(3, 12, seed=1)
    batch[2] = batch[0]
    embeddings = model.embed(batch)
    assert np.allclose(embeddings[0], embeddings[2], atol=1e-12)
    alone = model.embed(batch[1:2])
    assert np.allclose(alone[0], embeddings[1], atol=1e-12)
    assert np.allclose(model.embed(batch, batch_size=1), embeddings, atol=1e-12)


def test_forward_wrong_input_size():
    """
    Ensure an input of the wrong size or channel count is refused.
    """
    model = SacNet(ModelConfig(**TINY))
    with pytest.raises(ConfigMismatch):
        forward(model, images(1, 10))
    with pytest.raises(ConfigMismatch):
        forward(model, np.zeros((1, 2, 12, 12)))


def test_embed_empty():
    """
    Ensure embedding no images returns an empty matrix.
    """
    model = SacNet(ModelConfig(**TINY))
    assert model.embed(np.zeros((0, 1, 12, 12))).shape == (0, 8)


@pytest.mark.parametrize(
    "use_iscm,use_ascm,extra",
    [(False, False, 0), (True, False, 3), (False, True, 1), (True, True, 4)],
)
def test_competition_flags_change_graph(use_iscm, use_ascm, extra):
    """
    Ensure disabling a competition removes its softmax from the graph, so
    only the attention softmaxes remain with both disabled.
    """
    cfg = ModelConfig(**TINY).replace(use_iscm=use_iscm, use_ascm=use_ascm)
    embeddings, _ = forward(SacNet(cfg), images(2, 12))
    n_softmax = T.Graph(embeddings).op_names().count("softmax")
    assert n_softmax == 3 * cfg.msa_heads + extra


def test_grouped_ascm_single_softmax():
    """
    Ensure the grouped competition is one softmax over the scale axis.
    """
    cfg = ModelConfig(**TINY).replace(ascm_grouped=True)
    embeddings, _ = forward(SacNet(cfg), images(2, 12))
    assert T.Graph(embeddings).op_names().count("softmax") == 3 * cfg.msa_heads + 4


def test_branch_ablation():
    """
    Ensure disabled branches are not built and the head shrinks with them.
    """
    cfg = ModelConfig(**TINY).replace(use_branches=[False, True, False])
    model = SacNet(cfg)
    assert list(model.branches) == ["ms"]
    assert model.w_embed.shape == (2 * cfg.n_orientations, cfg.embedding_dim)
    assert all(name.startswith(("ms.", "head.")) for name, _ in model.named_parameters())
    full = SacNet(ModelConfig(**TINY))
    assert model.parameter_count() < full.parameter_count()
    assert full.parameter_count() == sum(t.data.size for t in full.parameters())
    embeddings, _ = forward(model, images(2, 12))
    assert embeddings.shape == (2, 8)


def test_every_learnable_tensor_is_registered():
    """
    Ensure the leaves reached by the loss are exactly the registered
    parameters, each listed once.
    """
    model = SacNet(ModelConfig(**TINY))
    embeddings, logits = forward(model, images(2, 12))
    total = loss(model.cfg, embeddings, logits, [0, 1], [(0, 1, False)])
    leaves = {id(t) for t in T.Graph(total).leaves()}
    registered = [id(t) for t in model.parameters()]
    assert len(registered) == len(set(registered))
    assert leaves == set(registered)


def test_cross_entropy_uniform_logits():
    """
    Ensure all-equal logits give a cross-entropy of log(classes).
    """
    cfg = ModelConfig(**TINY).replace(w_con=0.0)
    embeddings = T.Tensor(np.eye(2))
    total, ce, contrastive = loss_terms(cfg, embeddings, T.Tensor(np.zeros((2, 5))), [1, 4], [])
    assert ce.item() == pytest.approx(math.log(5))
    assert contrastive.item() == 0.0
    assert total.item() == pytest.approx(math.log(5))


def test_contrastive_examples():
    """
    Ensure same-label pairs cost their squared distance and different-label
    pairs cost the squared shortfall from the margin.
    """
    cfg = ModelConfig(**TINY).replace(w_ce=0.0, margin=0.5)
    embeddings = T.Tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    logits = T.Tensor(np.zeros((3, 2)))

    def contrastive(plan):
        return loss_terms(cfg, embeddings, logits, [0, 1, 0], plan)[2].item()

    assert contrastive([(0, 2, True)]) == 0.0
    assert contrastive([(0, 1, False)]) == 0.0
    assert contrastive([(0, 1, True)]) == pytest.approx(2.0)
    assert contrastive([(0, 2, False)]) == pytest.approx(0.25, abs=1e-5)
    assert contrastive([(0, 1, True), (0, 2, False)]) == pytest.approx(1.125, abs=1e-5)


def test_loss_weights():
    """
    Ensure the total is the weighted sum of both terms.
    """
    cfg = ModelConfig(**TINY).replace(w_ce=2.0, w_con=3.0)
    embeddings = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
    logits = T.Tensor([[2.0, 0.0], [0.0, 1.0]])
    total, ce, contrastive = loss_terms(cfg, embeddings, logits, [0, 1], [(0, 1, True)])
    assert total.item() == pytest.approx(2.0 * ce.item() + 3.0 * contrastive.item())


def test_empty_pair_plan():
    """
    Ensure a weighted contrastive term without pairs is refused.
    """
    cfg = ModelConfig(**TINY)
    with pytest.raises(EmptyPairPlan):
        loss(cfg, T.Tensor(np.eye(2)), T.Tensor(np.zeros((2, 3))), [0, 1], [])


def test_full_model_gradients():
    """
    Ensure the loss of a small complete network passes the gradient check
    on a sample of entries of every parameter.
    """
    cfg = ModelConfig(
        branch_kernel_sizes=[3, 5, 7],
        n_orientations=2,
        input_hw=8,
        msa_heads=2,
        msa_embed_dim=4,
        embedding_dim=4,
        n_classes=2,
        batch_size=2,
        margin=2.5,
    )
    model = SacNet(cfg)
    batch = images(2, 8, seed=3)

    def full_loss():
        embeddings, logits = forward(model, batch)
        return loss(cfg, embeddings, logits, [0, 1], [(0, 1, False)])

    check_gradients(full_loss, model.parameters(), eps=1e-5, tolerance=1e-4, max_entries=3)


def test_every_parameter_receives_gradient():
    """
    Ensure one backward pass leaves a non-zero gradient on every learnable
    tensor.
    """
    model = SacNet(ModelConfig(**TINY))
    embeddings, logits = forward(model, images(4, 12, seed=5))
    pairs = [(0, 1, False), (2, 3, False), (0, 3, True)]
    total = loss(model.cfg, embeddings, logits, [0, 1, 2, 0], pairs)
    total.backward()
    for name, tensor in model.named_parameters():
        assert tensor.grad is not None, name
        assert np.any(tensor.grad != 0), name
