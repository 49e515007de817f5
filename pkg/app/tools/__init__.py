"""Initialize the tools package."""
