"""Exception hierarchy shared by the library and the CLI."""


class RAError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(RAError, ValueError):
    """Invalid configuration, architecture mismatch, or bad argument."""

    exit_code = 2


class DataError(RAError):
    """Unreadable, missing, or malformed data on disk."""

    exit_code = 3


class StateError(RAError, RuntimeError):
    """An object was used before it was ready (untrained model, missing backend)."""

    exit_code = 1


class NonFiniteLossError(RAError, FloatingPointError):
    """Training produced a NaN/Inf; carries the offending term name."""

    exit_code = 4

    def __init__(self, term, step=None, phase=None):
        self.term = term
        self.step = step
        self.phase = phase
        where = f" at step {step}" if step is not None else ""
        if phase:
            where += f" ({phase} update)"
        super().__init__(f"non-finite value in loss term '{term}'{where}")
