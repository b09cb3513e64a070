"""Exception types shared across the package."""


class DriftflError(Exception):
    """Base class for package-specific failures."""


class DegenerateInputError(DriftflError, ValueError):
    """An input is numerically degenerate (e.g. a zero-norm vector)."""


class IllConditionedError(DriftflError, ValueError):
    """A linear system is singular or near-singular without regularization."""

    def __init__(self, message, smallest_singular_value=None):
        super().__init__(message)
        self.smallest_singular_value = smallest_singular_value


class CoverageError(DriftflError, ValueError):
    """A labeled sample is missing one or more required classes."""

    def __init__(self, message, missing_classes=()):
        super().__init__(message)
        self.missing_classes = tuple(missing_classes)


class ConfigError(DriftflError, ValueError):
    """An experiment configuration violates one or more constraints.

    Collects every violation so callers see the full list at once.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
