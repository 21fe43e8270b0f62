"""Idempotent experience replay for class-incremental continual learning."""

__version__ = "0.1.0"
