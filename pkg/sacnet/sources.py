# SPDX-FileCopyrightText: 2019 Nicholas Tollervey, written for Adafruit Industries
# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Source classes that represent where training and evaluation samples
come from: an image tree on disk or the synthetic generator.
"""
import os

from sacnet.dataset import load_dataset
from sacnet.shared import SYNTHETIC_DATA, EmptyDataset
from sacnet.synthetic import SyntheticSpec, generate_synthetic


class DataSource:
    """
    DataSource parent class to be extended for source specific
    implementations
    """

    def __init__(self, logger):
        self.logger = logger
        self._cache = {}

    def _load(self, input_hw):
        """
        Must be overridden by subclass for implementation!

        :param int input_hw: Side of the square images the model expects.
        :return: A DatasetManifest.
        """
        raise NotImplementedError

    def load(self, input_hw):
        """
        Load (once per size) the samples of this source.

        :param int input_hw: Side of the square images the model expects.
        :return: A DatasetManifest.
        """
        if input_hw not in self._cache:
            manifest = self._load(input_hw)
            if not len(manifest):
                raise EmptyDataset("{} holds no samples".format(self))
            self.logger.info("Using %s from %s", manifest, self)
            self._cache[input_hw] = manifest
        return self._cache[input_hw]

    def split(self, input_hw, require_eval=False):
        """
        :return: ``(manifest, train_indices, eval_indices)``.
        """
        manifest = self.load(input_hw)
        train, held_out = manifest.split(require_eval=require_eval)
        return manifest, train, held_out


class DiskSource(DataSource):
    """
    Samples stored as ``<root>/<subject_id>/<sample>.png|.pgm``.

    :param str root: The dataset directory.
    :param logger: logger to use for outputting messages
    """

    def __init__(self, root, logger):
        if not os.path.isdir(root):
            raise EmptyDataset("Dataset directory {} does not exist".format(root))
        super().__init__(logger)
        self.root = root

    def _load(self, input_hw):
        return load_dataset(self.root, input_hw)

    def __repr__(self):
        return "DiskSource({})".format(self.root)


class SyntheticSource(DataSource):
    """
    Samples drawn by the synthetic generator. The image size follows the
    model, so ``spec.image_hw`` is overridden on load.

    :param SyntheticSpec spec: Generator parameters, defaults when None.
    :param logger: logger to use for outputting messages
    """

    def __init__(self, spec, logger):
        super().__init__(logger)
        self.spec = spec or SyntheticSpec()

    def _load(self, input_hw):
        values = self.spec.as_dict()
        values["image_hw"] = input_hw
        return generate_synthetic(SyntheticSpec(**values))

    def __repr__(self):
        return "SyntheticSource({})".format(self.spec)


def get_source(data, logger, spec=None):
    """
    :param str data: A dataset directory or ``synthetic``.
    :param logger: logger handed to the source.
    :param SyntheticSpec spec: Generator parameters for ``synthetic``.
    :return: The matching DataSource.
    """
    if data == SYNTHETIC_DATA:
        return SyntheticSource(spec, logger)
    return DiskSource(data, logger)
