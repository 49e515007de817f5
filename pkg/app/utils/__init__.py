"""Initialize the utils package."""
