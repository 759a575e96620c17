# SPDX-FileCopyrightText: 2019 Nicholas Tollervey, 2024 Tim Cocks, written for Adafruit Industries
# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Logging utilities and configuration used by sacnet
"""
import os
import sys
import logging
from logging.handlers import RotatingFileHandler
import appdirs

from sacnet.shared import DATA_DIR

#: The directory containing the utility's log file.
LOG_DIR = appdirs.user_log_dir(appname="sacnet", appauthor="sacnet")
#: The location of the log file for the utility.
LOGFILE = os.path.join(LOG_DIR, "sacnet.log")

# Ensure DATA_DIR / LOG_DIR related directories and files exist.
if not os.path.exists(DATA_DIR):  # pragma: no cover
    os.makedirs(DATA_DIR)
if not os.path.exists(LOG_DIR):  # pragma: no cover
    os.makedirs(LOG_DIR)

# Setup logging.
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)
logfile_handler = RotatingFileHandler(LOGFILE, maxBytes=10_000_000, backupCount=0)
log_formatter = logging.Formatter(
    "%(asctime)s %(levelname)s: %(message)s", datefmt="%m/%d/%Y %H:%M:%S"
)
logfile_handler.setFormatter(log_formatter)
logger.addHandler(logfile_handler)


def add_verbose_handler(stream=None):
    """
    Echo log records to ``stream`` (stdout by default) as well as the log
    file. Calling it again reuses the handler already installed.

    :return: The stream handler.
    """
    for handler in logger.handlers:
        if getattr(handler, "sacnet_verbose", False):
            return handler
    verbose_handler = logging.StreamHandler(stream or sys.stdout)
    verbose_handler.setLevel(logging.INFO)
    verbose_handler.setFormatter(log_formatter)
    verbose_handler.sacnet_verbose = True
    logger.addHandler(verbose_handler)
    return verbose_handler


def remove_verbose_handler():
    """Stop echoing log records outside the log file."""
    for handler in list(logger.handlers):
        if getattr(handler, "sacnet_verbose", False):
            logger.removeHandler(handler)
