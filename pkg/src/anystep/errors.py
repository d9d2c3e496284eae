"""Exception types shared across the package."""


class DomainError(ValueError):
    """A time or argument lies outside the range where a formula is defined."""


class DegenerateError(ArithmeticError):
    """A denominator in the transition algebra vanished (|x| below 1e-12)."""


class NumericAbort(FloatingPointError):
    """Training or sampling produced non-finite values.

    ``diagnostics`` carries whatever context the raiser could gather
    (offending times, interval histogram, step index).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
