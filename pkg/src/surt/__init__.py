"""Streaming multi-talker transducer training and evaluation on numpy."""

__version__ = "0.1.0"
