"""Relaxed proximal splitting algorithms with parameter validation."""

__version__ = "0.1.0"
