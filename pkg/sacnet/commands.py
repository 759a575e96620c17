# SPDX-FileCopyrightText: 2019 Nicholas Tollervey, 2024 Tim Cocks, written for Adafruit Industries
# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
# ----------- CLI command definitions  ----------- #

The following functions have IO side effects (for instance they emit to
stdout). Most of the functionality they provide comes from
command_utils.py and the library modules, which are tested on their own.
The logic here prepares things for presentation to the user.
"""
import os
import sys

import click

from sacnet.command_utils import (
    ablation_markdown,
    compcode_baseline,
    evaluate_model,
    fit_classes,
    get_sacnet_version,
    load_model_config,
    report_errors,
    run_ablation,
)
from sacnet.logging import LOGFILE, add_verbose_handler, logger
from sacnet.shared import SYNTHETIC_DATA, ConfigError, ensure_directory
from sacnet.sources import get_source
from sacnet.synthetic import SyntheticSpec, generate_synthetic
from sacnet.training import CHECKPOINT_FILE, Checkpoint, train
from sacnet.verification import PAIRINGS, emit_report

#: File names written by the commands.
ABLATION_FILE = "ablation.md"
COMPCODE_FILE = "compcode.bin"


def _spec(path):
    return SyntheticSpec.from_file(path) if path else None


@click.group()
@click.option(
    "--verbose", is_flag=True, help="Comprehensive logging is sent to stdout."
)
@click.version_option(
    version=get_sacnet_version() or "0.0.0",
    prog_name="sacnet",
    message="%(prog)s, scale-aware competitive palmprint verification. Version %(version)s",
)
@click.pass_context
def main(ctx, verbose):
    """
    Train, evaluate and ablate scale-aware competitive networks for
    palmprint verification.
    """
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose
    if verbose:
        add_verbose_handler()
        click.echo("Logging to {}\n".format(LOGFILE))
    logger.info("### Started sacnet %s ###", ctx.invoked_subcommand)


@main.command("train")
@click.option(
    "--config",
    type=click.Path(exists=True, dir_okay=False),
    help="Model config file (key = value). Defaults to the packaged config.",
)
@click.option(
    "--data", required=True, help="Dataset directory, or 'synthetic' for generated data."
)
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option(
    "--spec",
    type=click.Path(exists=True, dir_okay=False),
    help="Synthetic spec file used with --data synthetic.",
)
@report_errors
def train_cli(config, data, out, spec):
    """
    Train a model on the train split and write checkpoints and metrics.
    """
    cfg = load_model_config(config)
    source = get_source(data, logger, _spec(spec))
    manifest, train_idx, _ = source.split(cfg.input_hw)
    cfg = fit_classes(cfg, manifest)
    click.echo("Training on {} samples of {} subjects.".format(len(train_idx),
                                                               manifest.n_subjects))
    run = train(cfg, manifest.images[train_idx], manifest.labels[train_idx], out_dir=out)
    last = run.history[-1]
    click.echo(
        "Finished {} steps: loss {:.6f}, train accuracy {:.3f}.".format(
            last.step, last.loss, last.train_acc
        )
    )
    click.echo("Checkpoint written to {}".format(os.path.join(out, CHECKPOINT_FILE)))


@main.command("eval")
@click.option(
    "--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False),
    help="Checkpoint written by 'train'.",
)
@click.option(
    "--data", required=True, help="Dataset directory, or 'synthetic' for generated data."
)
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option(
    "--spec",
    type=click.Path(exists=True, dir_okay=False),
    help="Synthetic spec file used with --data synthetic.",
)
@click.option("--pairing", type=click.Choice(PAIRINGS), default="all", show_default=True)
@click.option("--k", "k", default=10, show_default=True,
              help="Impostor partners per sample with --pairing sampled.")
@click.option("--seed", default=0, show_default=True, help="Seed of the sampled pairing.")
@report_errors
def eval_cli(checkpoint, data, out, spec, pairing, k, seed):
    """
    Score the eval split with a trained model and write roc.csv,
    metrics.txt and roc.svg.
    """
    model = Checkpoint.load(checkpoint).restore_model()
    source = get_source(data, logger, _spec(spec))
    manifest, _, eval_idx = source.split(model.cfg.input_hw, require_eval=True)
    scores, curve, eer_point = evaluate_model(model, manifest, eval_idx, pairing=pairing,
                                              k=k, seed=seed)
    emit_report(curve, eer_point, out)
    click.echo(
        "EER {:.4%} at threshold {:.6f} over {} genuine and {} impostor scores.".format(
            eer_point[0], eer_point[1], scores.genuine.size, scores.impostor.size
        )
    )


@main.command("ablate")
@click.option(
    "--config",
    type=click.Path(exists=True, dir_okay=False),
    help="Model config file (key = value). Defaults to the packaged config.",
)
@click.option(
    "--data", default=SYNTHETIC_DATA, show_default=True,
    help="Dataset directory, or 'synthetic' for generated data.",
)
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option(
    "--spec",
    type=click.Path(exists=True, dir_okay=False),
    help="Synthetic spec file used with --data synthetic.",
)
@click.option("--seed", "seeds", multiple=True, type=int,
              help="Training seed; repeat for one EER column per seed.")
@click.option("--grouped", is_flag=True,
              help="Add a row with grouped across-scale competition.")
@report_errors
def ablate(config, data, out, spec, seeds, grouped):
    """
    Retrain every branch-scale and competition-module combination and
    write the EER tables to ablation.md.
    """
    cfg = load_model_config(config)
    seeds = list(seeds) or [cfg.seed]
    manifest = get_source(data, logger, _spec(spec)).load(cfg.input_hw)
    results = run_ablation(cfg, manifest, seeds, grouped=grouped, out_dir=out)
    ensure_directory(out)
    table = ablation_markdown(results, seeds)
    with open(os.path.join(out, ABLATION_FILE), "w", encoding="utf-8") as ablation_file:
        ablation_file.write(table)
    click.echo(table)


@main.command("baseline-compcode")
@click.option(
    "--data", required=True, help="Dataset directory, or 'synthetic' for generated data."
)
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option(
    "--config",
    type=click.Path(exists=True, dir_okay=False),
    help="Model config supplying input size, orientations and the middle kernel size.",
)
@click.option(
    "--spec",
    type=click.Path(exists=True, dir_okay=False),
    help="Synthetic spec file used with --data synthetic.",
)
@click.option("--kernel-size", type=int, default=None,
              help="Gabor kernel size. Defaults to the middle branch size.")
@click.option("--max-shift", default=3, show_default=True,
              help="Largest translation tried when matching codes.")
@report_errors
def baseline_compcode(data, out, config, spec, kernel_size, max_shift):
    """
    Encode the eval split with a frozen Gabor bank, match every pair of
    CompCode maps and report the EER.
    """
    cfg = load_model_config(config)
    kernel_size = kernel_size or cfg.branch_kernel_sizes[1]
    if kernel_size % 2 == 0:
        raise ConfigError("--kernel-size must be odd, got {}".format(kernel_size))
    manifest, _, eval_idx = get_source(data, logger, _spec(spec)).split(
        cfg.input_hw, require_eval=True
    )
    codes, scores, curve, eer_point = compcode_baseline(
        manifest, eval_idx, kernel_size, cfg.n_orientations, max_shift=max_shift
    )
    emit_report(curve, eer_point, out)
    codes.save(os.path.join(out, COMPCODE_FILE))
    click.echo(
        "CompCode EER {:.4%} over {} genuine and {} impostor scores.".format(
            eer_point[0], scores.genuine.size, scores.impostor.size
        )
    )


@main.command("synth")
@click.option(
    "--spec",
    type=click.Path(exists=True, dir_okay=False),
    help="Synthetic spec file (key = value). Defaults are used when omitted.",
)
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@report_errors
def synth(spec, out):
    """
    Write a synthetic palmprint dataset as <out>/<subject_id>/<sample>.png.
    """
    manifest = generate_synthetic(_spec(spec) or SyntheticSpec(), out_dir=out)
    click.echo(
        "Wrote {} samples of {} subjects to {} "
        "(within-subject r={:.3f}, cross-subject r={:.3f}).".format(
            len(manifest),
            manifest.n_subjects,
            out,
            manifest.stats["within_subject_pearson"],
            manifest.stats["cross_subject_pearson"],
        )
    )


def cli(argv=None):
    """
    Run the command group and translate the outcome into an exit code:
    0 on success, 1 for usage and configuration errors, 2 for runtime errors.

    :param list argv: Arguments without the program name; ``sys.argv[1:]`` when None.
    :return: The exit code.
    """
    try:
        main.main(args=argv, prog_name="sacnet", standalone_mode=False)
    except click.ClickException as ex:
        ex.show()
        return 1
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except click.exceptions.Exit as ex:
        return ex.exit_code
    except SystemExit as ex:
        return ex.code if isinstance(ex.code, int) else 1
    return 0


def run():
    """Console script entry point."""
    sys.exit(cli())
