# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""Allows execution via ``python -m sacnet``."""
from sacnet.commands import run

run()
