"""Exception types shared across the package."""


class DataError(Exception):
    """Malformed or inconsistent input data (parse errors, bad shapes)."""


class ParseError(DataError):
    """LIBSVM text that cannot be tokenized; carries a line number."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class NumericsError(Exception):
    """Numerical failure: blow-up, ill-conditioned gradient, fit failure."""


class TrajectoryBlowUp(NumericsError):
    def __init__(self, t):
        super().__init__(f"trajectory blow-up at t={t:.6g}")
        self.t = t


class StoppingNotReached(NumericsError):
    """The gradient-norm threshold was never crossed before t_max."""
