"""Field reconstruction in a lossy acoustic tube and radiation coefficient estimation."""

__version__ = "0.1.0"
