# SPDX-FileCopyrightText: 2019 Nicholas Tollervey, written for Adafruit Industries
# SPDX-FileCopyrightText: 2023 Tim Cocks, written for Adafruit Industries
# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Constants, the error vocabulary and the key=value config reader shared by
the library modules and the click CLI command functions.
"""
import os
import importlib.resources
import appdirs
import toml

#: The location of data files used by sacnet (following OS conventions).
DATA_DIR = appdirs.user_data_dir(appname="sacnet", appauthor="sacnet")

#: Configuration shipped with the package: full-sized and desk-scale.
DEFAULT_CONFIG_FILE = importlib.resources.files("sacnet") / "config/default.conf"
TOY_CONFIG_FILE = importlib.resources.files("sacnet") / "config/toy.conf"
DESK_CONFIG_FILE = importlib.resources.files("sacnet") / "config/desk.conf"

#: Image file extensions accepted by the dataset loader.
IMAGE_EXTENSIONS = (".png", ".pgm")

#: Value of ``--data`` that selects the synthetic generator instead of a directory.
SYNTHETIC_DATA = "synthetic"

#: Names of the three branches, tiny to large scale.
BRANCH_NAMES = ("ts", "ms", "ls")


class ShapeMismatch(ValueError):
    """Operands whose shapes cannot be combined."""


class NotScalar(ValueError):
    """Backward was started from a tensor holding more than one element."""


class EvenKernelSize(ValueError):
    """A Gabor kernel needs an odd size so a center pixel exists."""


class ConfigMismatch(ValueError):
    """Input data that disagrees with the model configuration."""


class ConfigError(ValueError):
    """An invalid configuration file: unknown key, bad value or broken invariant."""


class EmptyPairPlan(ValueError):
    """The contrastive term is weighted but no pairs were planned."""


class DegenerateLabels(ValueError):
    """Verification needs at least two classes."""


class EmptyDataset(RuntimeError):
    """A dataset root without usable samples."""


class UnreadableImage(RuntimeError):
    """
    An image file that could not be decoded.

    :param str path: The offending file.
    :param Exception cause: What went wrong while decoding it.
    """

    def __init__(self, path, cause):
        super().__init__("Unable to read image {}: {}".format(path, cause))
        self.path = path
        self.cause = cause


class CheckpointError(RuntimeError):
    """A checkpoint file with a bad magic, unknown version or truncated body."""


def read_config_file(path, known_keys):
    """
    Read a flat ``key = value`` config file.

    Values follow TOML syntax, so lists, booleans and floats are all
    available. Every key must be one of ``known_keys``.

    :param str path: The config file to read.
    :param known_keys: The field names that are allowed.
    :return: A dictionary of the values found in the file.
    """
    try:
        with open(path, "r", encoding="utf-8") as config_file:
            values = toml.load(config_file)
    except toml.TomlDecodeError as ex:
        raise ConfigError("Could not parse {}: {}".format(path, ex)) from ex
    for key, value in values.items():
        if isinstance(value, dict):
            raise ConfigError(
                "Config {} must be flat, found section '{}'".format(path, key)
            )
        if key not in known_keys:
            raise ConfigError("Unknown config key '{}' in {}".format(key, path))
    return values


def ensure_directory(path):
    """
    Create ``path`` (and parents) if it does not exist yet.

    :param str path: Directory to create.
    :return: The same path.
    """
    if not os.path.isdir(path):
        os.makedirs(path)
    return path
