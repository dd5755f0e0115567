"""Version information for weakalign-det."""

__version__ = "0.1.0"
