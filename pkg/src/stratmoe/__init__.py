"""Stratified mixture-of-experts blocks, baselines and a toy translation harness."""

__version__ = "0.1.0"
