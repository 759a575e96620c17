# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Loading ROI image trees laid out as ``<root>/<subject_id>/<sample>.png``
and splitting them per subject into train and eval samples.
"""
import math
import os

import numpy as np
from PIL import Image, UnidentifiedImageError

from sacnet.logging import logger
from sacnet.shared import IMAGE_EXTENSIONS, EmptyDataset, UnreadableImage


class DatasetManifest:
    """
    Decoded samples of a dataset, ordered by subject then file name.

    :param str root: Where the samples came from (None for in-memory data).
    :param list entries: ``(subject_id, path)`` per sample.
    :param images: ``[n, 1, h, w]`` float array in ``[0, 1]``.
    """

    def __init__(self, root, entries, images):
        self.root = root
        self.entries = list(entries)
        self.images = np.asarray(images, dtype=np.float64)
        if len(self.entries) != len(self.images):
            raise ValueError("Need one image per entry, got {} and {}".format(
                len(self.images), len(self.entries)))
        paths = [path for _, path in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("A sample is listed twice in the manifest")
        self.subjects = sorted({subject for subject, _ in self.entries})
        index = {subject: i for i, subject in enumerate(self.subjects)}
        self.labels = np.array([index[subject] for subject, _ in self.entries], dtype=np.int64)
        self.stats = {}

    def __len__(self):
        return len(self.entries)

    @property
    def n_subjects(self):
        return len(self.subjects)

    def split(self, require_eval=False):
        """
        Per subject, the first ``ceil(n / 2)`` samples train and the rest
        evaluate.

        :param bool require_eval: Every subject must get an eval sample.
        :return: ``(train_indices, eval_indices)`` arrays into the manifest.
        :raises EmptyDataset: When ``require_eval`` is set and a subject
            has a single sample.
        """
        train, held_out = [], []
        for label, subject in enumerate(self.subjects):
            members = np.flatnonzero(self.labels == label)
            cut = math.ceil(len(members) / 2)
            if len(members) < 2:
                if require_eval:
                    raise EmptyDataset(
                        "Subject {} has a single sample and no eval split".format(subject)
                    )
                logger.warning("Subject %s has a single sample; it is used for training only",
                               subject)
            train.extend(members[:cut])
            held_out.extend(members[cut:])
        return np.array(train, dtype=np.int64), np.array(held_out, dtype=np.int64)

    def __repr__(self):
        return repr(
            {
                "root": self.root,
                "samples": len(self),
                "subjects": self.n_subjects,
                "shape": self.images.shape[1:],
            }
        )


def read_image(path, input_hw):
    """
    Decode one 8-bit grayscale image and resize it bilinearly.

    :param str path: A ``.png`` or ``.pgm`` file.
    :param int input_hw: Side of the square output.
    :return: ``[input_hw, input_hw]`` float array in ``[0, 1]``.
    :raises UnreadableImage: When the file cannot be decoded.
    """
    if not path.lower().endswith(IMAGE_EXTENSIONS):
        raise UnreadableImage(path, "unsupported file type, expected one of {}".format(
            ", ".join(IMAGE_EXTENSIONS)))
    try:
        with Image.open(path) as image:
            image = image.convert("L")
            if image.size != (input_hw, input_hw):
                image = image.resize((input_hw, input_hw), Image.Resampling.BILINEAR)
            pixels = np.asarray(image, dtype=np.float64)
    except (OSError, ValueError, UnidentifiedImageError, Image.DecompressionBombError) as ex:
        raise UnreadableImage(path, ex) from ex
    return pixels / 255.0


def write_image(path, pixels):
    """
    Store ``pixels`` (values in ``[0, 1]``) as an 8-bit grayscale image.
    """
    quantized = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized).save(path)


def load_dataset(root, input_hw):
    """
    Read every sample under ``root``. Sub-directories are subjects; files
    directly in ``root`` and hidden entries are ignored.

    :param str root: Dataset directory.
    :param int input_hw: Side the images are resized to.
    :return: DatasetManifest.
    :raises EmptyDataset: When no sample is found.
    :raises UnreadableImage: Naming the first file that fails to decode.
    """
    if not os.path.isdir(root):
        raise EmptyDataset("Dataset root {} is not a directory".format(root))
    entries = []
    for subject in sorted(os.listdir(root)):
        subject_dir = os.path.join(root, subject)
        if subject.startswith(".") or not os.path.isdir(subject_dir):
            continue
        for name in sorted(os.listdir(subject_dir)):
            path = os.path.join(subject_dir, name)
            if not name.startswith(".") and os.path.isfile(path):
                entries.append((subject, path))
    if not entries:
        raise EmptyDataset("No samples found under {}".format(root))
    images = np.stack([read_image(path, input_hw) for _, path in entries])[:, None]
    manifest = DatasetManifest(root, entries, images)
    logger.info("Loaded dataset %s", manifest)
    return manifest
