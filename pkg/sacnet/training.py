# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Optimizer, batch planning, the training loop, checkpoints and the
per-step metrics log.
"""
import csv
import json
import math
import os
import struct

import numpy as np

from sacnet import tensor as T
from sacnet.logging import logger
from sacnet.network import ModelConfig, SacNet, forward, loss_terms
from sacnet.shared import CheckpointError, ensure_directory

#: Magic and version of the checkpoint file.
CHECKPOINT_MAGIC = b"SACN"
CHECKPOINT_VERSION = 1
#: Latest checkpoint written by ``train``; per-epoch files sit next to it.
CHECKPOINT_FILE = "checkpoint.sacn"
EPOCH_CHECKPOINT_FILE = "checkpoint-epoch{:03d}.sacn"
METRICS_FILE = "metrics.csv"
METRICS_HEADER = ("step", "epoch", "loss", "ce", "contrastive", "train_acc")


class AdamState:
    """
    Moments and step counter of the Adam optimizer.

    :param list shapes: Shape of every parameter, in registration order.
    """

    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros(shape) for shape in shapes]
        self.v = [np.zeros(shape) for shape in shapes]


def adam_step(state, params, grads):
    """
    One bias-corrected Adam update.

    :param AdamState state: Updated in place.
    :param list params: Current parameter arrays.
    :param list grads: Matching gradients; None counts as zero.
    :return: The updated parameter arrays.
    """
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    updated = []
    for index, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            grad = np.zeros_like(param)
        # 0-d parameters must stay 0-d arrays, not numpy scalars.
        state.m[index] = np.asarray(state.beta1 * state.m[index] + (1.0 - state.beta1) * grad)
        state.v[index] = np.asarray(
            state.beta2 * state.v[index] + (1.0 - state.beta2) * grad * grad
        )
        m_hat = state.m[index] / correction1
        v_hat = state.v[index] / correction2
        updated.append(np.asarray(param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)))
    return updated


class Adam:
    """
    Adam over a fixed list of leaf tensors.

    :param list params: The learnable leaves; each must appear once.
    :param float lr: Learning rate.
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("A parameter was registered with the optimizer twice")
        self.state = AdamState([p.shape for p in self.params], lr, beta1, beta2, eps)

    def step(self):
        new_values = adam_step(self.state, [p.data for p in self.params],
                               [p.grad for p in self.params])
        for param, value in zip(self.params, new_values):
            param.data = value

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()


def plan_pairs(labels):
    """
    Pair every consecutive index of a batch.

    :param labels: Class labels of the batch, in batch order.
    :return: ``(i, i + 1, same_class)`` triples.
    """
    labels = list(labels)
    return [(i, i + 1, labels[i] == labels[i + 1]) for i in range(len(labels) - 1)]


def balanced_batches(labels, batch_size, rng):
    """
    Shuffle samples into two-sample chunks of one class, shuffle the chunks
    and cut the result into batches. A class with an odd sample count
    repeats one of its samples to complete its last chunk.

    :param labels: Class label per sample.
    :param int batch_size: Samples per batch (the last one may be shorter).
    :param numpy.random.Generator rng: Source of the shuffles.
    :return: List of index arrays.
    """
    labels = np.asarray(labels)
    chunks = []
    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        if len(members) % 2:
            members = np.append(members, members[rng.integers(len(members))])
        chunks.extend(members.reshape(-1, 2))
    order = rng.permutation(len(chunks))
    flat = np.concatenate([chunks[i] for i in order]) if chunks else np.zeros(0, np.int64)
    return [flat[start : start + batch_size] for start in range(0, len(flat), batch_size)]


class MetricsRow:
    """One line of the metrics log."""

    def __init__(self, step, epoch, loss, ce, contrastive, train_acc):
        self.step = step
        self.epoch = epoch
        self.loss = loss
        self.ce = ce
        self.contrastive = contrastive
        self.train_acc = train_acc

    def as_row(self):
        return [self.step, self.epoch] + [
            repr(float(v)) for v in (self.loss, self.ce, self.contrastive, self.train_acc)
        ]

    def __repr__(self):
        return repr(dict(zip(METRICS_HEADER, self.as_row())))


class TrainingRun:
    """
    Everything a call to :func:`train` produced.

    :param SacNet model: The trained network.
    :param Adam optimizer: Its optimizer.
    :param list history: MetricsRow per step.
    :param Checkpoint checkpoint: Snapshot after the last epoch.
    """

    def __init__(self, model, optimizer, history, checkpoint):
        self.model = model
        self.optimizer = optimizer
        self.history = history
        self.checkpoint = checkpoint

    @property
    def losses(self):
        return [row.loss for row in self.history]


def train(cfg, images, labels, out_dir=None, max_steps=None):
    """
    Train a fresh SacNet on ``images``.

    :param ModelConfig cfg: Architecture and hyperparameters.
    :param images: ``[n, 1, h, w]`` array in ``[0, 1]``.
    :param labels: ``n`` class indices in ``[0, n_classes)``.
    :param str out_dir: When given, receives the metrics log and checkpoints.
    :param int max_steps: Stop after this many optimizer steps.
    :return: A TrainingRun.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels) or not len(images):
        raise ValueError("Need as many labels as images, got {} and {}".format(
            len(images), len(labels)))
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise ValueError("Labels must lie in [0, {})".format(cfg.n_classes))
    rng = np.random.default_rng(cfg.seed)
    model = SacNet(cfg)
    optimizer = Adam(model.parameters(), cfg.lr)
    history = []
    metrics_path = None
    if out_dir:
        ensure_directory(out_dir)
        metrics_path = os.path.join(out_dir, METRICS_FILE)
        with open(metrics_path, "w", newline="", encoding="utf-8") as metrics_file:
            csv.writer(metrics_file, lineterminator="\n").writerow(METRICS_HEADER)
    logger.info("Training on %s samples of %s classes", len(images), len(np.unique(labels)))
    checkpoint = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        epoch_rows = []
        for batch in balanced_batches(labels, cfg.batch_size, rng):
            if max_steps is not None and step >= max_steps:
                break
            step += 1
            batch_labels = labels[batch]
            optimizer.zero_grad()
            embeddings, logits = forward(model, images[batch])
            total, ce, contrastive = loss_terms(
                cfg, embeddings, logits, batch_labels, plan_pairs(batch_labels)
            )
            batch_accuracy = float(np.mean(np.argmax(logits.data, axis=1) == batch_labels))
            total.backward()
            optimizer.step()
            row = MetricsRow(
                step, epoch, total.item(), ce.item(), contrastive.item(), batch_accuracy
            )
            if not math.isfinite(row.loss):
                logger.warning("Non-finite loss at step %s: %s", step, row)
            logger.info("Step %s", row)
            epoch_rows.append(row)
        if not epoch_rows:
            break
        history.extend(epoch_rows)
        checkpoint = Checkpoint.capture(model, optimizer, epoch, rng)
        logger.info(
            "Epoch %s: mean loss %s, mean train accuracy %s",
            epoch,
            np.mean([r.loss for r in epoch_rows]),
            np.mean([r.train_acc for r in epoch_rows]),
        )
        if out_dir:
            with open(metrics_path, "a", newline="", encoding="utf-8") as metrics_file:
                writer = csv.writer(metrics_file, lineterminator="\n")
                for row in epoch_rows:
                    writer.writerow(row.as_row())
            checkpoint.save(os.path.join(out_dir, EPOCH_CHECKPOINT_FILE.format(epoch)))
            checkpoint.save(os.path.join(out_dir, CHECKPOINT_FILE))
    return TrainingRun(model, optimizer, history, checkpoint)


def accuracy(model, images, labels, batch_size=32):
    """
    :return: Fraction of ``images`` whose arg-max logit is the label.
    """
    images = np.asarray(images, dtype=np.float64)
    hits = 0
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            _, logits = forward(model, images[start : start + batch_size])
            predicted = np.argmax(logits.data, axis=1)
            hits += int(np.sum(predicted == labels[start : start + batch_size]))
    return hits / max(len(images), 1)


class _Reader:
    """Cursor over a checkpoint payload that reports truncation."""

    def __init__(self, payload, path):
        self.payload = payload
        self.path = path
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.payload):
            raise CheckpointError("Truncated checkpoint {} at byte {}".format(self.path,
                                                                             self.offset))
        chunk = self.payload[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def text(self):
        (length,) = self.unpack("I")
        return self.take(length).decode("utf-8")


def _pack_text(text):
    data = text.encode("utf-8")
    return struct.pack("<I", len(data)) + data


def _pack_array(name, array):
    encoded = name.encode("utf-8")
    array = np.asarray(array, dtype="<f8")
    header = struct.pack("<H", len(encoded)) + encoded + b"d" + struct.pack("<B", array.ndim)
    return header + struct.pack("<{}I".format(array.ndim), *array.shape) + array.tobytes()


def _unpack_array(reader):
    (name_length,) = reader.unpack("H")
    name = reader.take(name_length).decode("utf-8")
    tag = reader.take(1)
    if tag != b"d":
        raise CheckpointError("Unsupported dtype tag {!r} for {} in {}".format(
            tag, name, reader.path))
    (ndim,) = reader.unpack("B")
    shape = reader.unpack("{}I".format(ndim)) if ndim else ()
    count = int(np.prod(shape)) if ndim else 1
    values = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64)
    return name, values.reshape(shape)


class Checkpoint:
    """
    Snapshot of a model, its optimizer and the training position.

    :param ModelConfig config: The architecture.
    :param dict params: Parameter arrays by name, in registration order.
    :param int adam_step: Optimizer step counter.
    :param dict m: First moments by name.
    :param dict v: Second moments by name.
    :param int epoch: Epochs completed.
    :param dict rng_state: Bit generator state of the batch shuffler.
    """

    def __init__(self, config, params, adam_step=0, m=None, v=None, epoch=0, rng_state=None,
                 version=CHECKPOINT_VERSION):
        self.version = version
        self.config = config
        self.params = dict(params)
        self.adam_step = adam_step
        self.m = dict(m or {})
        self.v = dict(v or {})
        self.epoch = epoch
        self.rng_state = rng_state or {}

    @classmethod
    def capture(cls, model, optimizer=None, epoch=0, rng=None):
        """
        :return: A Checkpoint holding copies of the current values.
        """
        named = model.named_parameters()
        params = {name: tensor.data.copy() for name, tensor in named}
        m, v, step = {}, {}, 0
        if optimizer is not None:
            step = optimizer.state.step
            m = {name: moment.copy() for (name, _), moment in zip(named, optimizer.state.m)}
            v = {name: moment.copy() for (name, _), moment in zip(named, optimizer.state.v)}
        rng_state = rng.bit_generator.state if rng is not None else {}
        return cls(model.cfg, params, step, m, v, epoch, rng_state)

    def to_bytes(self):
        parts = [
            CHECKPOINT_MAGIC,
            struct.pack("<I", self.version),
            _pack_text(self.config.to_text()),
            struct.pack("<I", self.epoch),
            _pack_text(json.dumps(self.rng_state, sort_keys=True)),
            struct.pack("<I", len(self.params)),
        ]
        parts.extend(_pack_array(name, array) for name, array in self.params.items())
        parts.append(struct.pack("<I", self.adam_step))
        for prefix, moments in (("m/", self.m), ("v/", self.v)):
            parts.append(struct.pack("<I", len(moments)))
            parts.extend(_pack_array(prefix + name, array) for name, array in moments.items())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, payload, path="<memory>"):
        reader = _Reader(payload, path)
        magic = reader.take(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError("{} is not a checkpoint (magic {!r})".format(path, magic))
        (version,) = reader.unpack("I")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError("Unsupported checkpoint version {} in {}".format(version, path))
        config = ModelConfig.from_text(reader.text())
        (epoch,) = reader.unpack("I")
        rng_state = json.loads(reader.text())
        (count,) = reader.unpack("I")
        params = dict(_unpack_array(reader) for _ in range(count))
        (step,) = reader.unpack("I")
        moments = []
        for prefix in ("m/", "v/"):
            (count,) = reader.unpack("I")
            table = {}
            for _ in range(count):
                name, array = _unpack_array(reader)
                if not name.startswith(prefix):
                    raise CheckpointError("Unexpected record {} in {}".format(name, path))
                table[name[len(prefix) :]] = array
            moments.append(table)
        if reader.offset != len(payload):
            raise CheckpointError("Trailing bytes after checkpoint body in {}".format(path))
        return cls(config, params, step, moments[0], moments[1], epoch, rng_state, version)

    def save(self, path):
        with open(path, "wb") as checkpoint_file:
            checkpoint_file.write(self.to_bytes())
        logger.info("Wrote checkpoint %s to %s", self, path)

    @classmethod
    def load(cls, path):
        """
        :raises CheckpointError: On a bad magic, unknown version or truncated file.
        """
        with open(path, "rb") as checkpoint_file:
            payload = checkpoint_file.read()
        checkpoint = cls.from_bytes(payload, path)
        logger.info("Loaded checkpoint %s from %s", checkpoint, path)
        return checkpoint

    def restore_model(self):
        """
        :return: A SacNet carrying the stored parameter values.
        """
        model = SacNet(self.config)
        named = model.named_parameters()
        if [name for name, _ in named] != list(self.params):
            raise CheckpointError("Checkpoint parameters do not match the model layout")
        for name, tensor in named:
            if tensor.shape != self.params[name].shape:
                raise CheckpointError("Parameter {} has shape {}, expected {}".format(
                    name, self.params[name].shape, tensor.shape))
            tensor.data = self.params[name].copy()
        return model

    def restore_optimizer(self, model):
        """
        :return: An Adam over ``model`` continuing from the stored moments.
        """
        optimizer = Adam(model.parameters(), self.config.lr)
        if self.m:
            names = [name for name, _ in model.named_parameters()]
            optimizer.state.m = [self.m[name].copy() for name in names]
            optimizer.state.v = [self.v[name].copy() for name in names]
        optimizer.state.step = self.adam_step
        return optimizer

    def restore_rng(self):
        rng = np.random.default_rng()
        if self.rng_state:
            rng.bit_generator.state = self.rng_state
        return rng

    def __repr__(self):
        return repr(
            {
                "version": self.version,
                "epoch": self.epoch,
                "parameters": len(self.params),
                "adam_step": self.adam_step,
            }
        )
