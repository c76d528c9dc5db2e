"""Offline multi-agent RL workbench for wireless control tasks."""

__version__ = "0.1.0"
