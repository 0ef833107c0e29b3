"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """An input violates a documented precondition."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (factorization, overflow, ...)."""


class InnerDivergenceError(NumericalError):
    """The inner Newton solve did not reach the requested gradient tolerance."""

    def __init__(self, message, grad_norm):
        super().__init__(message)
        self.grad_norm = grad_norm
