"""Decoy — randomized dummy-operation defense against bit-flip attacks."""

__version__ = "0.4.0"
