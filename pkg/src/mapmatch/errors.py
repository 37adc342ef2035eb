"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed or inconsistent input data (network files, probes, truth)."""


class NetworkLoadError(DataError):
    """A network document failed validation."""


class InvariantError(RuntimeError):
    """An internal invariant was violated (indicates a builder or model bug)."""
