"""Communicative vision-language decoding on a synthetic micro-world."""

__version__ = "0.1.0"
