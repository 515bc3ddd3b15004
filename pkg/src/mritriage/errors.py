"""Exception hierarchy shared by the library and the CLI."""


class TriageError(Exception):
    """Base class for all errors raised by :mod:`mritriage`."""


class ValidationError(TriageError, ValueError):
    """An argument or parameter is outside its allowed range."""


class DataError(TriageError, ValueError):
    """Input data is malformed or cannot support the requested computation."""


class TrainingError(TriageError, RuntimeError):
    """Optimisation diverged (non-finite loss or parameters)."""
