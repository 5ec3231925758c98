"""Non-technical loss detection from smart-meter statistical profile images."""

__version__ = "0.1.0"
