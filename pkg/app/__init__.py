"""Repository-level line completion with an iterative retrieve-generate-reflect loop."""

__version__ = "0.1.0"
