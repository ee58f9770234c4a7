"""Detection-head-level cooperative perception fusion on synthetic BEV scenes."""

__version__ = "0.1.0"
