"""Multilingual instruction tuning with RLHF on a tiny numpy transformer."""

__version__ = "0.1.0"
