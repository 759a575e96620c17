# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Synthetic palmprint-like ROIs for desk-scale experiments.

Each subject owns a few dark principal-line strokes, an oriented stripe
texture with its own period and a smooth shading field. Samples of a
subject differ only by a crop offset, a contrast change and pixel noise.
The shading dominates the pixel correlation between samples of one
subject. ``shading_std = 0`` leaves the strokes and stripes alone.
"""
import itertools
import math
import os

import numpy as np

from sacnet.dataset import DatasetManifest, write_image
from sacnet.logging import logger
from sacnet.shared import ConfigError, ensure_directory, read_config_file

#: Name of the file holding the generation-time correlation check.
STATS_FILE = "synthetic_stats.txt"

#: Depth of the darkest point of a principal line.
LINE_DEPTH = 0.2
#: Amplitude of the stripe texture.
STRIPE_AMPLITUDE = 0.05
#: Samples per subject used for the within-subject correlation.
STATS_SAMPLES = 4


class SyntheticSpec:
    """
    Parameters of a synthetic dataset; keyword arguments override the
    defaults and unknown names raise ConfigError.
    """

    DEFAULTS = {
        "n_subjects": 10,
        "samples_per_subject": 20,
        "image_hw": 64,
        "max_shift": 3,
        "contrast_jitter": 0.1,
        "noise_sigma": 0.02,
        "min_strokes": 2,
        "max_strokes": 4,
        "stripe_periods": [4.0, 8.0],
        "shading_std": 0.18,
        "seed": 0,
    }

    def __init__(self, **values):
        for key in values:
            if key not in self.DEFAULTS:
                raise ConfigError("Unknown synthetic spec key '{}'".format(key))
        for key, default in self.DEFAULTS.items():
            value = values.get(key, default)
            setattr(self, key, list(value) if isinstance(value, list) else value)
        self.validate()

    @classmethod
    def from_file(cls, path):
        return cls(**read_config_file(path, cls.DEFAULTS))

    def validate(self):
        if self.n_subjects < 1 or self.samples_per_subject < 1:
            raise ConfigError("Need at least one subject and one sample per subject")
        if self.image_hw < 8:
            raise ConfigError("image_hw must be >= 8, got {}".format(self.image_hw))
        if self.max_shift < 0 or not 0 <= self.contrast_jitter < 1 or self.noise_sigma < 0:
            raise ConfigError("Jitter parameters must be non-negative (contrast below 1)")
        if self.shading_std < 0:
            raise ConfigError("shading_std must be >= 0, got {}".format(self.shading_std))
        if not 1 <= self.min_strokes <= self.max_strokes:
            raise ConfigError("Stroke counts must satisfy 1 <= min_strokes <= max_strokes")
        low, high = self.stripe_periods
        if not 2 <= low <= high:
            raise ConfigError("stripe_periods must be an increasing pair >= 2")

    @property
    def canvas_hw(self):
        return self.image_hw + 2 * self.max_shift

    def as_dict(self):
        return {key: getattr(self, key) for key in self.DEFAULTS}

    def __repr__(self):
        return repr(self.as_dict())


def _grid(size):
    y, x = np.mgrid[0:size, 0:size]
    return x.astype(np.float64), y.astype(np.float64)


def _shading(spec, rng, x, y):
    field = np.zeros_like(x)
    for _ in range(3):
        angle = rng.uniform(0.0, math.pi)
        period = rng.uniform(0.75, 2.0) * spec.canvas_hw
        phase = rng.uniform(0.0, 2.0 * math.pi)
        along = x * math.cos(angle) + y * math.sin(angle)
        field += rng.uniform(0.5, 1.0) * np.cos(2.0 * math.pi * along / period + phase)
    window = field[spec.max_shift : spec.max_shift + spec.image_hw,
                   spec.max_shift : spec.max_shift + spec.image_hw]
    return spec.shading_std * (field - window.mean()) / max(window.std(), 1e-12)


def _strokes(spec, rng, x, y):
    darkening = np.zeros_like(x)
    centre = spec.canvas_hw / 2.0
    for _ in range(rng.integers(spec.min_strokes, spec.max_strokes + 1)):
        angle = rng.uniform(0.0, math.pi)
        x0, y0 = rng.uniform(0.25, 0.75, size=2) * spec.canvas_hw
        width = rng.uniform(1.2, 2.0)
        bend = rng.uniform(-1.0, 1.0) / spec.canvas_hw
        along = (x - x0) * math.cos(angle) + (y - y0) * math.sin(angle)
        across = (x - x0) * math.sin(angle) - (y - y0) * math.cos(angle) + bend * along**2
        fade = np.exp(-(along / centre) ** 4)
        darkening = np.maximum(darkening, fade * np.exp(-(across**2) / (2.0 * width**2)))
    return LINE_DEPTH * darkening


def _stripes(spec, rng, x, y):
    angle = rng.uniform(0.0, math.pi)
    period = rng.uniform(*spec.stripe_periods)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    across = x * math.cos(angle) + y * math.sin(angle)
    return STRIPE_AMPLITUDE * np.cos(2.0 * math.pi * across / period + phase)


def render_subject(spec, subject):
    """
    :return: The noise-free ``[canvas_hw, canvas_hw]`` canvas of ``subject``.
    """
    rng = np.random.default_rng([spec.seed, subject])
    x, y = _grid(spec.canvas_hw)
    shading = _shading(spec, rng, x, y)
    strokes = _strokes(spec, rng, x, y)
    stripes = _stripes(spec, rng, x, y)
    return 0.5 + shading - strokes + stripes


def render_sample(spec, canvas, subject, sample):
    """
    Crop, re-contrast and add noise to a subject canvas.

    :return: ``[image_hw, image_hw]`` array clipped to ``[0, 1]``.
    """
    rng = np.random.default_rng([spec.seed, subject, sample + 1])
    dy, dx = rng.integers(0, 2 * spec.max_shift + 1, size=2)
    crop = canvas[dy : dy + spec.image_hw, dx : dx + spec.image_hw]
    contrast = 1.0 + rng.uniform(-spec.contrast_jitter, spec.contrast_jitter)
    image = 0.5 + contrast * (crop - 0.5)
    image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def _pearson(a, b):
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denominator = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / denominator if denominator else 0.0


def correlation_stats(images, labels):
    """
    :param images: ``[n, 1, h, w]`` samples.
    :param labels: Subject index per sample.
    :return: ``within_subject_pearson`` (mean over the first sample pairs of
        each subject) and ``cross_subject_pearson`` (mean over subject pairs
        of their first samples).
    """
    labels = np.asarray(labels)
    within, firsts = [], []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        firsts.append(images[members[0], 0])
        for i, j in itertools.combinations(members[:STATS_SAMPLES], 2):
            within.append(_pearson(images[i, 0], images[j, 0]))
    cross = [_pearson(a, b) for a, b in itertools.combinations(firsts, 2)]
    return {
        "within_subject_pearson": float(np.mean(within)) if within else float("nan"),
        "cross_subject_pearson": float(np.mean(cross)) if cross else float("nan"),
    }


def generate_synthetic(spec, out_dir=None):
    """
    Render the dataset described by ``spec``.

    :param SyntheticSpec spec: What to generate.
    :param str out_dir: When given, samples are written as
        ``<out_dir>/<subject_id>/<sample>.png`` next to ``synthetic_stats.txt``.
    :return: DatasetManifest; ``stats`` holds the correlation check.
    """
    entries, images = [], []
    for subject in range(spec.n_subjects):
        canvas = render_subject(spec, subject)
        subject_id = "s{:03d}".format(subject)
        for sample in range(spec.samples_per_subject):
            name = os.path.join(subject_id, "{:03d}.png".format(sample))
            entries.append((subject_id, os.path.join(out_dir, name) if out_dir else name))
            images.append(render_sample(spec, canvas, subject, sample))
    manifest = DatasetManifest(out_dir, entries, np.stack(images)[:, None])
    manifest.stats = correlation_stats(manifest.images, manifest.labels)
    logger.info("Generated synthetic dataset %s from %s: %s", manifest, spec, manifest.stats)
    if out_dir:
        dump(manifest, out_dir)
    return manifest


def dump(manifest, out_dir):
    """
    Write every sample of ``manifest`` as 8-bit PNG plus the stats file.
    Entry paths are taken relative to ``out_dir`` unless they already
    point inside it.
    """
    ensure_directory(out_dir)
    for (_, path), image in zip(manifest.entries, manifest.images):
        if manifest.root != out_dir:
            path = os.path.join(out_dir, path)
        ensure_directory(os.path.dirname(path))
        write_image(path, image[0])
    with open(os.path.join(out_dir, STATS_FILE), "w", encoding="utf-8") as stats_file:
        for key, value in sorted(manifest.stats.items()):
            stats_file.write("{}={!r}\n".format(key, value))
    logger.info("Wrote synthetic dataset to %s", out_dir)
