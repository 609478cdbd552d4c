"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: validation failures exit 2, backend
failures exit 3, undefined-metric conditions exit 4.
"""


class GradekitError(Exception):
    pass


class ValidationError(GradekitError):
    pass


class SpecValidationError(ValidationError):
    """Carries every validation failure found in an exam spec, not just the first."""

    def __init__(self, failures):
        self.failures = list(failures)
        super().__init__("; ".join(self.failures))


class ScoreTableError(ValidationError):
    """Carries every bad cell found in a score table."""

    def __init__(self, failures):
        self.failures = list(failures)
        super().__init__("; ".join(self.failures))


class BackendError(GradekitError):
    pass


class FitError(GradekitError):
    pass


class UndefinedMetricError(GradekitError):
    pass
