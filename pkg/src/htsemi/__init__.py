"""Semiclassical Schrodinger dynamics on H-type groups."""
__version__ = "0.1.0"
