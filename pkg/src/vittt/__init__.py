"""Vision test-time-training layers, oracles and complexity models."""

__version__ = "0.1.0"
