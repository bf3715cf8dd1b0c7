"""Desk-scale continual learning lab measuring observed and linear-probe forgetting."""

__version__ = "0.1.0"
