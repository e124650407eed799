"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class NumericalDomainError(ArithmeticError):
    """Non-finite values reached an operation that cannot accept them."""


class NumericalFailure(RuntimeError):
    """Training produced a non-finite loss or gradient and was aborted."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
