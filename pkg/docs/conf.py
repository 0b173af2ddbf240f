# Configuration file for the Sphinx documentation builder.
#
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Path setup --------------------------------------------------------------

import os
import sys

sys.path.insert(0, os.path.abspath('..'))


# -- Project information -----------------------------------------------------

project = 'voxelpy'
copyright = '2026, oatsu'
author = 'oatsu'


# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.intersphinx',
    'sphinx.ext.autodoc',
    'sphinx.ext.viewcode',
    'sphinx.ext.mathjax',
    'sphinx.ext.todo'
]

templates_path = ['_templates']

language = 'ja'

exclude_patterns = ['_build']

intersphinx_mapping = {'numpy': ('https://numpy.org/doc/stable/', None)}


# -- Options for HTML output -------------------------------------------------

html_theme = 'furo'


# -- Options for todo extension ----------------------------------------------

todo_include_todos = True
