"""Exception types shared across the lab."""


class ContractError(ValueError):
    """An argument violates an operation's precondition."""


class EnumerationSizeError(RuntimeError):
    """Exact enumeration would exceed the configured cell budget."""


class NumericalAbort(RuntimeError):
    """A loss or gradient became non-finite during an optimisation run."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
