"""Class-incremental learning with dynamically expandable representations."""

__version__ = "0.1.0"
