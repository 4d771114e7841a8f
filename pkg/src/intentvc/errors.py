"""Exception types shared across the toolkit."""


class IntentVCError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(IntentVCError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(IntentVCError, ValueError):
    """A configuration value violates its invariants."""


class EvaluationError(IntentVCError, ArithmeticError):
    """A function under evaluation produced a non-finite value."""


class InputError(IntentVCError, ValueError):
    """Caller-supplied data is missing or inconsistent."""


class AnnotationParseError(IntentVCError):
    """An annotation file could not be parsed."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = self.path if line is None else f"{self.path}:{line}"
        super().__init__(f"{where}: {message}")


class ValidationError(IntentVCError, ValueError):
    """One or more dataset invariants are violated.

    ``violations`` holds ``Violation`` records so callers can report every
    problem at once instead of stopping at the first.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [str(v) for v in self.violations[:10]]
        more = len(self.violations) - len(lines)
        if more > 0:
            lines.append(f"... and {more} more")
        super().__init__("; ".join(lines) or "validation failed")


class UndefinedScoreError(IntentVCError, ValueError):
    """A metric is undefined for the given inputs (e.g. an empty corpus)."""
