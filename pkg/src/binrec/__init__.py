"""Graph-convolutional collaborative filtering distilled into binary codes."""

__version__ = "0.1.0"
