"""Hierarchical goal-conditioned offline RL with latent-space subgoal planning."""

__version__ = "0.1.0"
