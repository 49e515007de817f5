"""Initialize the services package."""
