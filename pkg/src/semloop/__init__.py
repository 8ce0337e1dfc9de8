"""Object-level semantic mapping and loop-closure back-end."""

__version__ = "0.1.0"
