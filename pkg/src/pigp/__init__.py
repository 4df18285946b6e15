"""Physics-informed GP topology optimization."""

__version__ = "0.1.0"
