# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
1:1 verification metrics: genuine/impostor score sets, ROC, EER and the
report files written by ``sacnet eval``.

Scores are similarities: higher means more likely genuine. A pair is
accepted at threshold ``t`` when its score is ``>= t``.
"""
import csv
import os

import numpy as np
from matplotlib import rc_context
from matplotlib.figure import Figure

from sacnet.logging import logger
from sacnet.shared import DegenerateLabels, ensure_directory

#: Report file names inside the output directory.
ROC_FILE = "roc.csv"
METRICS_TEXT_FILE = "metrics.txt"
ROC_SVG_FILE = "roc.svg"
PAIRINGS = ("all", "sampled")


class VerificationScoreSet:
    """
    :param genuine: Similarities of same-identity pairs.
    :param impostor: Similarities of different-identity pairs.
    """

    def __init__(self, genuine, impostor):
        self.genuine = np.asarray(genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(impostor, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.impostor))):
            raise ValueError("Verification scores must be finite")

    def check(self):
        """
        :raises DegenerateLabels: When either side is empty, for instance
            when every identity has a single sample.
        """
        if not self.genuine.size or not self.impostor.size:
            raise DegenerateLabels(
                "Need genuine and impostor scores, got {} and {}".format(
                    self.genuine.size, self.impostor.size
                )
            )

    def rates(self, thresholds):
        """
        :param thresholds: Decision thresholds.
        :return: ``(far, frr)`` arrays, one value per threshold.
        """
        thresholds = np.asarray(thresholds, dtype=np.float64)
        impostor = np.sort(self.impostor)
        genuine = np.sort(self.genuine)
        far = 1.0 - np.searchsorted(impostor, thresholds, side="left") / impostor.size
        frr = np.searchsorted(genuine, thresholds, side="left") / genuine.size
        return far, frr

    def __repr__(self):
        return repr({"n_genuine": self.genuine.size, "n_impostor": self.impostor.size})


def cosine_similarities(embeddings):
    """
    :param embeddings: ``[n, d]`` array.
    :return: ``[n, n]`` cosine similarity matrix.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    unit = embeddings / np.where(norms > 0, norms, 1.0)
    return unit @ unit.T


def build_score_set(embeddings, labels, pairing="all", k=10, seed=0, similarities=None):
    """
    Score every genuine pair and either every impostor pair or ``k``
    distinct impostor partners drawn per sample.

    :param embeddings: ``[n, d]`` embeddings (ignored when ``similarities`` is given).
    :param labels: ``n`` identity labels.
    :param str pairing: ``"all"`` or ``"sampled"``.
    :param int k: Impostor partners per sample in sampled mode.
    :param int seed: Seed of the sampled draw.
    :param similarities: Precomputed ``[n, n]`` score matrix.
    :return: VerificationScoreSet.
    :raises DegenerateLabels: When fewer than two identities are present.
    """
    labels = np.asarray(labels)
    if pairing not in PAIRINGS:
        raise ValueError("Unknown pairing '{}', expected one of {}".format(pairing, PAIRINGS))
    if labels.size < 2:
        raise ValueError("Verification needs at least two samples, got {}".format(labels.size))
    if np.unique(labels).size < 2:
        raise DegenerateLabels("Verification needs at least two identities")
    if similarities is None:
        similarities = cosine_similarities(embeddings)
    first, second = np.triu_indices(labels.size, k=1)
    same = labels[first] == labels[second]
    genuine = similarities[first[same], second[same]]
    if pairing == "all":
        impostor = similarities[first[~same], second[~same]]
    else:
        rng = np.random.default_rng(seed)
        drawn = []
        for index in range(labels.size):
            others = np.flatnonzero(labels != labels[index])
            partners = rng.choice(others, size=min(k, others.size), replace=False)
            drawn.append(similarities[index, partners])
        impostor = np.concatenate(drawn)
    scores = VerificationScoreSet(genuine, impostor)
    logger.info("Built %s score set %s", pairing, scores)
    return scores


def _sweep(scores):
    scores.check()
    distinct = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    thresholds = np.append(distinct, np.nextafter(distinct[-1], np.inf))
    far, frr = scores.rates(thresholds)
    return thresholds, far, frr


def eer(scores):
    """
    Equal error rate by linear interpolation at the FAR/FRR crossing.

    Thresholds sweep every distinct score plus one just above the
    largest. Between the last threshold with ``FAR > FRR`` and the first
    with ``FAR <= FRR`` both rates are interpolated linearly.

    :param VerificationScoreSet scores: Non-empty on both sides.
    :return: ``(eer, threshold)``.
    """
    thresholds, far, frr = _sweep(scores)
    diff = far - frr
    crossing = int(np.argmax(diff <= 0))
    if diff[crossing] == 0 or crossing == 0:
        return float(far[crossing]), float(thresholds[crossing])
    before = crossing - 1
    alpha = diff[before] / (diff[before] - diff[crossing])
    rate = far[before] + alpha * (far[crossing] - far[before])
    threshold = thresholds[before] + alpha * (thresholds[crossing] - thresholds[before])
    return float(rate), float(threshold)


class RocCurve:
    """
    ROC points ordered by increasing FAR.

    :param thresholds: Threshold of every point.
    :param far: False accept rate of every point.
    :param gar: Genuine accept rate (1 - FRR) of every point.
    """

    def __init__(self, thresholds, far, gar, n_genuine=0, n_impostor=0):
        self.thresholds = np.asarray(thresholds, dtype=np.float64)
        self.far = np.asarray(far, dtype=np.float64)
        self.gar = np.asarray(gar, dtype=np.float64)
        self.n_genuine = n_genuine
        self.n_impostor = n_impostor

    def __len__(self):
        return self.thresholds.size

    def auc(self):
        """
        :return: Area under the curve by the trapezoid rule, from the origin.
        """
        far = np.concatenate([[0.0], self.far])
        gar = np.concatenate([[0.0], self.gar])
        return float(np.sum(np.diff(far) * (gar[1:] + gar[:-1]) / 2.0))

    def __repr__(self):
        return repr({"points": len(self), "auc": self.auc()})


def roc(scores):
    """
    :param VerificationScoreSet scores: Non-empty on both sides.
    :return: RocCurve with one point per distinct score.
    """
    thresholds, far, frr = _sweep(scores)
    # drop the sentinel above the largest score, then order by FAR
    thresholds, far, frr = thresholds[::-1][1:], far[::-1][1:], frr[::-1][1:]
    return RocCurve(thresholds, far, 1.0 - frr, scores.genuine.size, scores.impostor.size)


def _render_svg(curve, eer_value, path):
    with rc_context({"svg.hashsalt": "sacnet", "svg.fonttype": "path"}):
        figure = Figure(figsize=(800 / 72.0, 600 / 72.0))
        axes = figure.add_subplot(1, 1, 1)
        axes.plot(np.concatenate([[0.0], curve.far]), np.concatenate([[0.0], curve.gar]),
                  color="tab:blue", label="ROC (EER {:.4f})".format(eer_value))
        axes.plot([0.0, 1.0], [1.0, 0.0], color="tab:gray", linestyle="--", linewidth=0.8)
        axes.set_xlim(0.0, 1.0)
        axes.set_ylim(0.0, 1.0)
        axes.set_xlabel("FAR")
        axes.set_ylabel("GAR")
        axes.legend(loc="lower right")
        figure.savefig(path, format="svg", metadata={"Date": None})


def emit_report(curve, eer_point, out_dir):
    """
    Write ``roc.csv``, ``metrics.txt`` and ``roc.svg`` into ``out_dir``.

    :param RocCurve curve: The ROC.
    :param tuple eer_point: ``(eer, threshold)`` as returned by :func:`eer`.
    :param str out_dir: Destination directory, created when missing.
    :return: Paths of the three files.
    """
    eer_value, threshold = eer_point
    ensure_directory(out_dir)
    roc_path = os.path.join(out_dir, ROC_FILE)
    metrics_path = os.path.join(out_dir, METRICS_TEXT_FILE)
    svg_path = os.path.join(out_dir, ROC_SVG_FILE)
    try:
        with open(roc_path, "w", newline="", encoding="utf-8") as roc_file:
            writer = csv.writer(roc_file, lineterminator="\n")
            writer.writerow(["threshold", "far", "gar"])
            for row in zip(curve.thresholds, curve.far, curve.gar):
                writer.writerow([format(value, ".12g") for value in row])
        metrics = [
            ("eer", repr(float(eer_value))),
            ("threshold", repr(float(threshold))),
            ("auc", repr(curve.auc())),
            ("n_genuine", str(curve.n_genuine)),
            ("n_impostor", str(curve.n_impostor)),
        ]
        with open(metrics_path, "w", encoding="utf-8") as metrics_file:
            metrics_file.writelines("{}={}\n".format(key, value) for key, value in metrics)
        _render_svg(curve, eer_value, svg_path)
    except OSError as ex:
        raise OSError("Unable to write verification report to {}: {}".format(out_dir, ex)) from ex
    logger.info("Wrote verification report (EER %s, %s) to %s", eer_value, curve, out_dir)
    return roc_path, metrics_path, svg_path


def read_metrics(path):
    """
    :param str path: A ``key=value`` metrics file.
    :return: Dictionary of floats (counts as ints).
    """
    values = {}
    with open(path, "r", encoding="utf-8") as metrics_file:
        for line in metrics_file:
            key, _, value = line.strip().partition("=")
            if key:
                values[key] = int(value) if key.startswith("n_") else float(value)
    return values
