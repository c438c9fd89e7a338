"""Modality-free human identification on planted data."""

__version__ = "0.1.0"
