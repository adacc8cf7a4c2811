#!/usr/bin/env python3
#
# americanrnn documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.
from os.path import abspath, dirname, join
from re import MULTILINE, search

docs_dir = abspath(dirname(__file__))
repo_dir = abspath(join(docs_dir, '..'))

# -- General configuration ------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.doctest',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
]

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = 'americanrnn'
# noinspection PyShadowingBuiltins
copyright = ''
author = ''

# The short X.Y version.
with open(join(repo_dir, 'americanrnn', '__init__.py'), encoding='utf8') as f:
    version = search(
        r'^__version__ = [\'"]([^\'"]*)[\'"]', f.read(), MULTILINE
    ).group(1)
# The full version, including alpha/beta/rc tags.
release = version

language = 'en'
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']
pygments_style = 'sphinx'
todo_include_todos = False

# Dataclass fields are documented in the class docstrings.
autodoc_member_order = 'bysource'
autodoc_typehints = 'description'


# -- Options for HTML output ----------------------------------------------

html_theme = 'alabaster'

# This is required for the alabaster theme
# refs: http://alabaster.readthedocs.io/en/latest/installation.html#sidebars
html_sidebars = {
    '**': [
        'relations.html',  # needs 'show_related': True theme option to display
        'searchbox.html',
    ]
}

htmlhelp_basename = 'americanrnndoc'


# -- Options for LaTeX output ---------------------------------------------

latex_documents = [
    (
        master_doc,
        'americanrnn.tex',
        'americanrnn Documentation',
        '',  # author_texescaped_str
        'manual',
    )
]

man_pages = [
    (master_doc, 'americanrnn', 'americanrnn Documentation', [author], 1)
]

texinfo_documents = [
    (
        master_doc,
        'americanrnn',
        'americanrnn Documentation',
        author,
        'americanrnn',
        'Deep GRU pricing and hedging of American basket options.',
        'Miscellaneous',
    ),
]

html_show_copyright = False
