class ConfigError(ValueError):
    """Invalid parameters; ``errors`` holds one message per violated rule."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class NumericalError(RuntimeError):
    """A numerical invariant was violated or an iteration failed to converge."""


class ConvergenceError(NumericalError):
    pass


class MemoryBudgetError(NumericalError):
    pass
