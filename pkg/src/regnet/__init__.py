"""Conditional sound generation from visual features with an audio forwarding regularizer."""
__version__ = "0.1.0"
