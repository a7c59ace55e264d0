"""Estimation for continuous-time hidden Markov models."""

__version__ = "0.1.0"
