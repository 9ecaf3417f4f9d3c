"""Desk-scale erase-and-repair sanitization lab for tiny language models."""

__version__ = "0.1.0"
