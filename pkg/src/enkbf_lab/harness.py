"""Experiment harness, importable under its module name.

The implementation lives in :mod:`enkbf_lab.experiments`; this module
re-exports it.
"""
from .experiments import *  # noqa: F401,F403
from .experiments import __all__  # noqa: F401
