"""Desk-scale lab for entropy dynamics in policy-gradient RL over softmax policies."""

__version__ = "0.1.0"
