"""Martingale-consistent self-supervised learning under partial observation."""

__version__ = "0.1.0"
