"""Normalized variance-reduced policy gradient for RL with general utilities."""

__version__ = "0.1.0"
