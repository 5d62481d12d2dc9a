"""Imitation-learning toolkit for DC optimal power flow."""

__version__ = "0.1.0"
