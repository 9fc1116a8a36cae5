"""Fall detection from wrist accelerometer streams with a deep GRU classifier."""

__version__ = "0.1.0"
