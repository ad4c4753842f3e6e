"""Desk-scale privacy benchmark for tiny language models."""

__version__ = "0.1.0"
