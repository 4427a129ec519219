"""Relevance-weighted raw-waveform audio front-end."""

__version__ = "0.1.0"
