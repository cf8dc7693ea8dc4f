"""Deterministic desk-scale simulator and trainer for image-driven object
search and grasping: one-shot target matching, hierarchical push/grasp
policies over pixel-wise Q-maps, a staged training curriculum, and scripted
evaluation suites with baselines."""

__version__ = "0.1.0"
