"""Error types shared across the toolkit."""


class FormatError(Exception):
    """Malformed or unsupported file content."""


class CapacityError(Exception):
    """Payload does not fit in the cover data."""
