"""Resilient replicated in-memory KV store over a simulated one-sided transport."""

__version__ = "0.1.0"
