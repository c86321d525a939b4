"""Trace-driven simulator of virtualized address translation and translation coherence."""

__version__ = "0.1.0"
