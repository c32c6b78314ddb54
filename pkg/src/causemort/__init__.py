"""Cause-specific mortality trend decomposition."""

__version__ = "0.1.0"
