"""Recover a controlled Markov process's transition function from a goal-conditioned policy."""

__version__ = "0.1.0"
