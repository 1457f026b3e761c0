"""Independent reference implementations used to freeze expected test values."""
