"""Desk-scale lab for memory-token segment-recurrent transformers."""

__version__ = "0.1.0"
