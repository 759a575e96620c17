# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Competitive coding of filter responses.

* Inner-scale competition (ISCM): softmax over the orientation channels of
  one branch.
* Across-scale competition (ASCM): softmax over the channels of all
  branches concatenated, jointly or grouped per orientation.
* CompCode: the classical hard code storing the index of the winning
  (darkest) orientation at every pixel, with its angular matching score.
"""
import struct

import numpy as np

from sacnet import tensor as T
from sacnet.attention import MsaConfig, init_msa, msa_forward
from sacnet.gabor import bank_forward, init_bank
from sacnet.logging import logger
from sacnet.shared import ShapeMismatch

# Re-exported: feature maps are the currency of this module.
FeatureMap = T.FeatureMap
CHANNEL_SEMANTICS = T.CHANNEL_SEMANTICS

#: Header of one serialized CompCodeMap record: magic, N_o, h, w.
COMPCODE_MAGIC = b"CCMP"
_COMPCODE_HEADER = struct.Struct("<4sHII")


class Branch:
    """
    One scale of the network: two stacked Gabor layers followed by MSA.

    :param GaborBank bank1: First layer, stride 1.
    :param GaborBank bank2: Second layer, applied with ``second_stride``.
    :param MsaConfig msa_cfg: Attention dimensions.
    :param MsaWeights msa_weights: Attention weights.
    :param int second_stride: Stride of the second Gabor layer.
    """

    def __init__(self, bank1, bank2, msa_cfg, msa_weights, second_stride=2):
        if bank1.kernel_size != bank2.kernel_size:
            raise ShapeMismatch(
                "Both Gabor layers of a branch share one kernel size, got {} and {}".format(
                    bank1.kernel_size, bank2.kernel_size
                )
            )
        self.bank1 = bank1
        self.bank2 = bank2
        self.msa_cfg = msa_cfg
        self.msa_weights = msa_weights
        self.second_stride = second_stride

    @property
    def kernel_size(self):
        return self.bank1.kernel_size

    @property
    def n_orientations(self):
        return self.bank2.n_orientations

    def named_parameters(self, prefix=""):
        return (
            self.bank1.named_parameters(prefix + "lgf1.")
            + self.bank2.named_parameters(prefix + "lgf2.")
            + self.msa_weights.named_parameters(prefix + "msa.")
        )


def init_branch(kernel_size, n_orientations, n_heads, embed_dim, seed, positional=False,
                second_stride=2):
    """
    Build a freshly initialised branch. The three components draw from
    seeds derived from ``seed`` so branches with different seeds differ.

    :return: The new Branch.
    """
    bank1 = init_bank(kernel_size, n_orientations, seed)
    bank2 = init_bank(kernel_size, n_orientations, seed + 1)
    cfg = MsaConfig(n_heads, embed_dim, in_channels=n_orientations, positional=positional)
    return Branch(bank1, bank2, cfg, init_msa(cfg, seed + 2), second_stride=second_stride)


def _tempered_softmax(x, axis, temperature):
    if temperature <= 0:
        raise ValueError("Softmax temperature must be positive, got {}".format(temperature))
    if temperature != 1.0:
        x = T.scale(x, 1.0 / temperature)
    return T.softmax(x, axis=axis)


def iscm_forward(branch, feature_map, temperature=1.0, method="im2col"):
    """
    Run one branch and compete along its orientation channels.

    :param Branch branch: Gabor layers and attention of the branch.
    :param FeatureMap feature_map: ``[b, 1, h, w]`` ROI batch in ``[0, 1]``.
    :param float temperature: Softmax temperature, 1 for the plain softmax.
    :param str method: conv2d method of the Gabor layers.
    :return: ``(f_msa, f_inner)`` FeatureMaps with orientation channels.
    """
    f_lgf = bank_forward(branch.bank1, feature_map, method=method)
    f_lgf = bank_forward(branch.bank2, f_lgf, stride=branch.second_stride, method=method)
    f_msa = msa_forward(branch.msa_cfg, branch.msa_weights, f_lgf)
    f_inner = _tempered_softmax(f_msa.tensor, 1, temperature)
    return f_msa, FeatureMap(f_inner, "orientation")


def ascm_forward(*feature_maps, grouped=False, temperature=1.0):
    """
    Concatenate branch outputs along channels and compete across them.

    The joint form applies one softmax over all concatenated channels per
    pixel. The grouped form views the channels as
    ``[b, scales, N_o, h, w]`` and competes over the scale axis separately
    for each orientation.

    :param feature_maps: The branch ``f_msa`` maps, in concatenation order.
    :param bool grouped: Compete per orientation instead of jointly.
    :param float temperature: Softmax temperature.
    :return: FeatureMap ``F_across`` with ``scale_group`` channel semantics.
    :raises ShapeMismatch: When batch or spatial dims disagree.
    """
    if not feature_maps:
        raise ValueError("ascm_forward needs at least one feature map")
    first = feature_maps[0]
    for fm in feature_maps[1:]:
        if fm.batch != first.batch or fm.spatial != first.spatial:
            raise ShapeMismatch(
                "Cannot fuse feature maps of shapes {} and {}".format(first.shape, fm.shape)
            )
    stacked = T.concat([fm.tensor for fm in feature_maps], axis=1)
    if not grouped:
        return FeatureMap(_tempered_softmax(stacked, 1, temperature), "scale_group")
    channels = {fm.channels for fm in feature_maps}
    if len(channels) != 1:
        raise ShapeMismatch("Grouped competition needs equal channel counts, got {}".format(
            sorted(channels)))
    n_orientations = channels.pop()
    batch, total, height, width = stacked.shape
    view = T.reshape(stacked, (batch, len(feature_maps), n_orientations, height, width))
    out = T.reshape(_tempered_softmax(view, 1, temperature), (batch, total, height, width))
    return FeatureMap(out, "scale_group")


class CompCodeMap:
    """
    Per-pixel winner orientation indices.

    :param winner_index: ``[b, h, w]`` integer array with values in ``[0, N_o)``.
    :param int n_orientations: Size of the bank that produced the code.
    """

    def __init__(self, winner_index, n_orientations):
        winner_index = np.asarray(winner_index)
        if winner_index.ndim == 2:
            winner_index = winner_index[None]
        if winner_index.ndim != 3:
            raise ShapeMismatch(
                "A CompCode map is [b, h, w], got shape {}".format(winner_index.shape)
            )
        if not 1 <= n_orientations <= 255:
            raise ValueError("n_orientations must be in [1, 255], got {}".format(n_orientations))
        if winner_index.size and (winner_index.min() < 0 or winner_index.max() >= n_orientations):
            raise ValueError("Winner indices must lie in [0, {})".format(n_orientations))
        self.winner_index = winner_index.astype(np.uint8)
        self.n_orientations = n_orientations

    @property
    def shape(self):
        return self.winner_index.shape

    @property
    def batch(self):
        return self.winner_index.shape[0]

    def __len__(self):
        return self.batch

    def __getitem__(self, index):
        return CompCodeMap(self.winner_index[index : index + 1], self.n_orientations)

    def to_bytes(self):
        """
        :return: One ``CCMP`` record per batch item, concatenated.
        """
        _, height, width = self.shape
        records = []
        for item in self.winner_index:
            header = _COMPCODE_HEADER.pack(COMPCODE_MAGIC, self.n_orientations, height, width)
            records.append(header)
            records.append(item.tobytes())
        return b"".join(records)

    @classmethod
    def from_bytes(cls, payload):
        """
        :param bytes payload: Concatenated ``CCMP`` records of equal geometry.
        :return: The CompCodeMap with all records stacked along the batch axis.
        """
        items, offset, geometry = [], 0, None
        while offset < len(payload):
            if len(payload) - offset < _COMPCODE_HEADER.size:
                raise ValueError("Truncated CompCode header at byte {}".format(offset))
            magic, n_orientations, height, width = _COMPCODE_HEADER.unpack_from(payload, offset)
            if magic != COMPCODE_MAGIC:
                raise ValueError("Bad CompCode magic {!r} at byte {}".format(magic, offset))
            if geometry not in (None, (n_orientations, height, width)):
                raise ShapeMismatch("CompCode records disagree on geometry")
            geometry = (n_orientations, height, width)
            offset += _COMPCODE_HEADER.size
            body = payload[offset : offset + height * width]
            if len(body) != height * width:
                raise ValueError("Truncated CompCode body at byte {}".format(offset))
            items.append(np.frombuffer(body, dtype=np.uint8).reshape(height, width))
            offset += height * width
        if geometry is None:
            raise ValueError("No CompCode records found")
        return cls(np.stack(items), geometry[0])

    def save(self, path):
        with open(path, "wb") as code_file:
            code_file.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as code_file:
            return cls.from_bytes(code_file.read())

    def __repr__(self):
        return repr({"shape": self.shape, "n_orientations": self.n_orientations})


def compcode_kernels(bank):
    """
    :param GaborBank bank: Source of the filter shapes.
    :return: The bank's kernels as a frozen ``[N_o, 1, k, k]`` array, each
        shifted to zero mean so flat regions give no response.
    """
    kernels = bank.frozen_kernels()
    kernels = kernels - kernels.mean(axis=(1, 2), keepdims=True)
    return kernels[:, None]


def compcode_encode(bank, feature_map, method="im2col"):
    """
    Store the index of the minimum filter response at every pixel.

    Each image's median is removed before filtering; with zero-mean
    kernels a constant image then gives exactly tied responses, and ties
    go to the lowest index.

    :param GaborBank bank: Frozen filters, used without gradients.
    :param feature_map: ``[b, 1, h, w]`` grayscale FeatureMap or array.
    :param str method: conv2d method.
    :return: CompCodeMap of shape ``[b, h, w]``.
    """
    if isinstance(feature_map, FeatureMap):
        feature_map = feature_map.numpy()
    images = np.asarray(feature_map, dtype=np.float64)
    if images.shape[1] != 1:
        raise ShapeMismatch("CompCode expects grayscale input, got {} channels".format(
            images.shape[1]))
    centred = images - np.median(images, axis=(1, 2, 3), keepdims=True)
    padding = (bank.kernel_size - 1) // 2
    with T.no_grad():
        responses = T.conv2d(T.Tensor(centred), compcode_kernels(bank), padding=padding,
                             method=method)
    return CompCodeMap(np.argmin(responses.data, axis=1), bank.n_orientations)


def _agreement(a, b, n_orientations):
    gap = np.abs(a.astype(np.int64) - b.astype(np.int64))
    gap = np.minimum(gap, n_orientations - gap)
    return float(np.mean(1.0 - gap / (n_orientations / 2.0)))


def compcode_match(a, b, max_shift=0):
    """
    Angular agreement of two codes: the mean over pixels of
    ``1 - gap / (N_o / 2)``, where ``gap`` is the circular index distance.

    With ``max_shift > 0`` the best score over integer translations of up
    to ``max_shift`` pixels is returned, each computed on the overlap.

    :param CompCodeMap a: First code.
    :param CompCodeMap b: Second code, same shape and bank size.
    :param int max_shift: Largest translation tried along each axis.
    :return: Score in ``[0, 1]``, 1 for identical codes.
    :raises ShapeMismatch: On differing shapes or orientation counts.
    """
    if a.shape != b.shape or a.n_orientations != b.n_orientations:
        raise ShapeMismatch(
            "Cannot match CompCode {} (N_o={}) with {} (N_o={})".format(
                a.shape, a.n_orientations, b.shape, b.n_orientations
            )
        )
    if max_shift < 0:
        raise ValueError("max_shift must be >= 0, got {}".format(max_shift))
    _, height, width = a.shape
    best = 0.0
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            if abs(dy) >= height or abs(dx) >= width:
                continue
            rows_a = slice(max(dy, 0), height + min(dy, 0))
            rows_b = slice(max(-dy, 0), height + min(-dy, 0))
            cols_a = slice(max(dx, 0), width + min(dx, 0))
            cols_b = slice(max(-dx, 0), width + min(-dx, 0))
            score = _agreement(
                a.winner_index[:, rows_a, cols_a],
                b.winner_index[:, rows_b, cols_b],
                a.n_orientations,
            )
            best = max(best, score)
    logger.debug("CompCode match %s vs %s -> %s", a, b, best)
    return best
