"""Anchored post-hoc unlearning for small dense classifiers, with exact oracles."""

__version__ = "0.1.0"
