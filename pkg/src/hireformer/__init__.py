"""Hierarchical Reformer document model for filing-driven volume prediction."""

__version__ = "0.1.0"
