# -*- coding: utf-8 -*-

# SPDX-FileCopyrightText: 2017 Scott Shawcroft, written for Adafruit Industries
# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT

import os
import sys

sys.path.insert(0, os.path.abspath(".."))

# -- General configuration ------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.intersphinx",
    "sphinx.ext.napoleon",
    "sphinx.ext.viewcode",
]

# Plotting and imaging are only needed at run time.
autodoc_mock_imports = ["matplotlib", "PIL"]

intersphinx_mapping = {
    "python": ("https://docs.python.org/3", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
}

# Show the docstring from both the class and its __init__() method.
autoclass_content = "both"

source_suffix = ".rst"
master_doc = "index"

project = "SAC-Net"
copyright = "2024, SAC-Net developers"
author = "SAC-Net developers"

version = "0.1"
release = "0.1"

language = "en"

exclude_patterns = [
    "_build",
    "Thumbs.db",
    ".DS_Store",
    ".env",
]

default_role = "any"
add_function_parentheses = True
pygments_style = "sphinx"
napoleon_numpy_docstring = False

# -- Options for HTML output ----------------------------------------------

on_rtd = os.environ.get("READTHEDOCS", None) == "True"

if not on_rtd:  # only import and set the theme if we're building docs locally
    try:
        import sphinx_rtd_theme

        html_theme = "sphinx_rtd_theme"
    except ImportError:
        html_theme = "default"
        html_theme_path = ["."]
else:
    html_theme_path = ["."]

htmlhelp_basename = "sacnetdoc"

# -- Options for other builders -------------------------------------------

latex_documents = [
    (master_doc, "sacnet.tex", "SAC-Net Documentation", author, "manual"),
]

man_pages = [
    (master_doc, "sacnet", "SAC-Net Documentation", [author], 1),
]

texinfo_documents = [
    (
        master_doc,
        "SAC-Net",
        "SAC-Net Documentation",
        author,
        "SAC-Net",
        "Scale-aware competitive palmprint verification.",
        "Science",
    ),
]
