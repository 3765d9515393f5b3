"""Desk-scale continual-learning experiment engine for short video clips."""

__version__ = "0.1.0"
