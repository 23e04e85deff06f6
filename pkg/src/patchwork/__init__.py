"""Stateful attention-window video inference at desk scale."""

__version__ = "0.1.0"
