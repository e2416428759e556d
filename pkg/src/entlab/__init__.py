"""Entropy dynamics of policy-gradient RL on tabular softmax policies."""

__version__ = "0.1.0"
