"""Gated propagation networks for few-shot learning over a class hierarchy."""

__version__ = "0.1.0"
