"""Reinforcement-learned early exiting for layered classifiers, at desk scale."""

__version__ = "0.1.0"
