"""Potential-game reductions for continuous multi-agent learning."""

__version__ = "0.1.0"
