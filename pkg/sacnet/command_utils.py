# SPDX-FileCopyrightText: 2019 Nicholas Tollervey, 2024 Tim Cocks, written for Adafruit Industries
# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Functions called from commands in order to provide behaviors and return information.
"""
import functools
import itertools
import os
import sys

import click
import numpy as np

from sacnet.competition import compcode_encode, compcode_match
from sacnet.gabor import init_bank
from sacnet.logging import logger
from sacnet.network import ModelConfig
from sacnet.shared import BRANCH_NAMES, DEFAULT_CONFIG_FILE, ConfigError
from sacnet.training import train
from sacnet.verification import build_score_set, eer, roc

#: Errors reported as runtime failures (exit code 2). ConfigError is a
#: ValueError and is caught first.
RUNTIME_ERRORS = (ValueError, RuntimeError, OSError)

#: Branch combinations of the scale ablation: (tiny, middle, large).
BRANCH_ABLATION = (
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (False, True, True),
    (True, True, True),
)

#: Module combinations of the competition ablation: (use_ascm, use_iscm).
MODULE_ABLATION = (
    (False, False),
    (False, True),
    (True, False),
    (True, True),
)


def get_sacnet_version():
    """Return the version of sacnet that is running. If not available, return None.

    :return: Current version of sacnet, or None.
    """
    try:
        from importlib import metadata  # pylint: disable=import-outside-toplevel
    except ImportError:  # pragma: no cover
        return None
    try:
        return metadata.version("sacnet")
    except metadata.PackageNotFoundError:
        return None


def report_errors(func):
    """
    Decorator for command functions: ConfigError exits with 1. Any other
    ValueError, RuntimeError or OSError exits with 2 after logging the
    traceback.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ConfigError as ex:
            logger.error("Configuration error: %s", ex)
            click.secho("Configuration error: {}".format(ex), fg="red", err=True)
            sys.exit(1)
        except RUNTIME_ERRORS as ex:
            logger.exception(ex)
            click.secho(str(ex), fg="red", err=True)
            sys.exit(2)

    return wrapper


def load_model_config(path=None):
    """
    :param str path: A config file, or None for the packaged default.
    :return: ModelConfig.
    """
    path = str(path) if path else str(DEFAULT_CONFIG_FILE)
    cfg = ModelConfig.from_file(path)
    logger.info("Using config %s: %s", path, cfg)
    return cfg


def fit_classes(cfg, manifest):
    """
    :return: ``cfg`` with ``n_classes`` equal to the subject count of ``manifest``.
    """
    if cfg.n_classes != manifest.n_subjects:
        logger.info("Setting n_classes to %s to match the dataset", manifest.n_subjects)
        cfg = cfg.replace(n_classes=manifest.n_subjects)
    return cfg


def evaluate_similarities(similarities, labels, pairing="all", k=10, seed=0):
    """
    :return: ``(scores, curve, (eer, threshold))`` for a similarity matrix.
    """
    scores = build_score_set(None, labels, pairing=pairing, k=k, seed=seed,
                             similarities=similarities)
    return scores, roc(scores), eer(scores)


def evaluate_model(model, manifest, indices, pairing="all", k=10, seed=0):
    """
    Embed the samples at ``indices`` and score them by cosine similarity.

    :return: ``(scores, curve, (eer, threshold))``.
    """
    embeddings = model.embed(manifest.images[indices])
    scores = build_score_set(embeddings, manifest.labels[indices], pairing=pairing, k=k,
                             seed=seed)
    return scores, roc(scores), eer(scores)


def compcode_similarities(codes, max_shift=0):
    """
    :param CompCodeMap codes: One map per sample.
    :return: ``[n, n]`` matrix of CompCode match scores.
    """
    n = len(codes)
    matrix = np.eye(n)
    for i, j in itertools.combinations(range(n), 2):
        matrix[i, j] = matrix[j, i] = compcode_match(codes[i], codes[j], max_shift=max_shift)
    return matrix


def compcode_baseline(manifest, indices, kernel_size, n_orientations, max_shift=0):
    """
    Encode the samples at ``indices`` with a frozen, noise-free bank and
    score every pair.

    :return: ``(codes, scores, curve, (eer, threshold))``.
    """
    bank = init_bank(kernel_size, n_orientations, seed=0, noise=0.0)
    codes = compcode_encode(bank, manifest.images[indices])
    similarities = compcode_similarities(codes, max_shift=max_shift)
    scores, curve, eer_point = evaluate_similarities(similarities, manifest.labels[indices])
    return codes, scores, curve, eer_point


def train_and_score(cfg, manifest, train_idx, eval_idx, out_dir=None):
    """
    Train on ``train_idx`` and return the EER on ``eval_idx``.
    """
    cfg = fit_classes(cfg, manifest)
    run = train(cfg, manifest.images[train_idx], manifest.labels[train_idx], out_dir=out_dir)
    _, _, (eer_value, _) = evaluate_model(run.model, manifest, eval_idx)
    return eer_value


def branch_label(flags):
    return "+".join(name for name, used in zip(BRANCH_NAMES, flags) if used)


def ablation_rows(cfg, grouped=False):
    """
    The cells of both ablation tables.

    :param ModelConfig cfg: The base configuration.
    :param bool grouped: Add a module row using grouped across-scale competition.
    :return: ``{"branch": [...], "module": [...]}``; each row is
        ``(label, cells, config)`` where ``cells`` are the table's flag columns.
    """
    rows = {"branch": [], "module": []}
    for flags in BRANCH_ABLATION:
        config = cfg.replace(use_branches=list(flags), use_iscm=True, use_ascm=True,
                             ascm_grouped=False)
        rows["branch"].append((branch_label(flags), list(flags), config))
    labels = {(False, False): "baseline", (False, True): "iscm", (True, False): "ascm",
              (True, True): "iscm+ascm"}
    for use_ascm, use_iscm in MODULE_ABLATION:
        config = cfg.replace(use_ascm=use_ascm, use_iscm=use_iscm, ascm_grouped=False)
        rows["module"].append((labels[(use_ascm, use_iscm)], [use_ascm, use_iscm], config))
    if grouped:
        config = cfg.replace(use_ascm=True, use_iscm=True, ascm_grouped=True)
        rows["module"].append(("iscm+ascm(grouped)", [True, True], config))
    return rows


def run_ablation(cfg, manifest, seeds, grouped=False, out_dir=None):
    """
    Retrain and evaluate every ablation cell for every seed. Cells whose
    configuration is identical are trained once.

    :return: ``{"branch": [(label, cells, [eer per seed])], "module": [...]}``.
    """
    train_idx, eval_idx = manifest.split(require_eval=True)
    rows = ablation_rows(cfg, grouped=grouped)
    cache = {}
    results = {}
    for table, table_rows in rows.items():
        results[table] = []
        for label, cells, config in table_rows:
            eers = []
            for seed in seeds:
                seeded = config.replace(seed=seed)
                key = seeded.to_text()
                if key not in cache:
                    cell_dir = None
                    if out_dir:
                        cell_dir = os.path.join(out_dir, "{}-{}-seed{}".format(table, label, seed))
                    cache[key] = train_and_score(seeded, manifest, train_idx, eval_idx,
                                                 out_dir=cell_dir)
                    logger.info("Ablation %s %s seed %s: EER %s", table, label, seed, cache[key])
                eers.append(cache[key])
            results[table].append((label, cells, eers))
    return results


def _yes_no(flag):
    return "yes" if flag else "no"


def ablation_markdown(results, seeds):
    """
    Render ablation results as two markdown tables, EERs in percent. Each
    table ends with a row naming the best configuration per seed.
    """
    headers = {
        "branch": ["Tiny scale", "Middle scale", "Large scale"],
        "module": ["ASCM", "ISCM"],
    }
    titles = {"branch": "Branch scale ablation", "module": "Competition module ablation"}
    lines = []
    for table in ("branch", "module"):
        columns = headers[table] + ["EER seed {} (%)".format(seed) for seed in seeds]
        lines.append("## {}".format(titles[table]))
        lines.append("")
        lines.append("| " + " | ".join(columns) + " |")
        lines.append("|" + "|".join("---" for _ in columns) + "|")
        rows = results[table]
        for _, cells, eers in rows:
            values = [_yes_no(c) for c in cells] + ["{:.4f}".format(100.0 * e) for e in eers]
            lines.append("| " + " | ".join(values) + " |")
        best = []
        for column in range(len(seeds)):
            label, _, _ = min(rows, key=lambda row, c=column: row[2][c])
            best.append(label)
        padding = [""] * (len(headers[table]) - 1)
        lines.append("| " + " | ".join(["**best**"] + padding + best) + " |")
        lines.append("")
    return "\n".join(lines)
