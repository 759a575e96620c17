# SPDX-FileCopyrightText: 2019 Nicholas Tollervey, written for Adafruit Industries
# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
sacnet -- scale-aware competitive networks for palmprint verification.
"""
from sacnet.shared import DATA_DIR
from sacnet.logging import logger
from sacnet.network import ModelConfig, SacNet, forward, loss
from sacnet.training import Checkpoint, train
from sacnet.verification import build_score_set, eer, roc, emit_report


__version__ = "0.0.0-auto.0"

from sacnet.commands import main, cli, run

# Allows execution via `python -m sacnet ...`
if __name__ == "__main__":  # pragma: no cover
    run()
