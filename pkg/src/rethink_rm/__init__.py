"""A branch-and-rethink reward modeling engine."""

__version__ = "0.1.0"
