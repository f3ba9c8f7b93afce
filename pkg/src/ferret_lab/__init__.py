"""Masked one-bit sign releases with mutual-information accounting, plus toy training and membership-inference harnesses."""

__version__ = "0.1.0"
