"""Dual-encoder visual token pipeline: budget planning, toy models, staged
training, and benchmark scoring tools."""

__version__ = "0.1.0"
