"""Influence-function laboratory: deterministic small-model training,
loss-variation machinery, four influence estimators, and the validation
experiments built on them."""

__version__ = "0.1.0"

from . import errors  # noqa: F401
