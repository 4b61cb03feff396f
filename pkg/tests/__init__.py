"""vncseg test suite."""
