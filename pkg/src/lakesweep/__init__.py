"""Distributed lake-model experiment platform at desk scale."""

__version__ = "0.1.0"
