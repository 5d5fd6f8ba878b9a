"""Approximate-model MPC/EMPC toolkit (Python bindings)."""

from ._approxmpc import *  # noqa: F401,F403
from ._approxmpc import __version__  # noqa: F401
