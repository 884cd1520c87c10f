"""Prompt calibration: fixed task contracts, reflective harness search, reproducible artifacts."""

__version__ = "0.1.0"
