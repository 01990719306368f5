"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or precondition violated by the caller."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class DivergenceError(NumericError):
    """Training residuals blew past the divergence guard."""

    def __init__(self, message, epoch=None, residual_inf=None):
        super().__init__(message)
        self.epoch = epoch
        self.residual_inf = residual_inf
