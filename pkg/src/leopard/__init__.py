"""Optimization-based meta-learning for text classification with
task-dependent generated softmax parameters."""

__version__ = "0.1.0"
