"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or unknown configuration (CLI exit code 2)."""


class SchemaError(ValueError):
    """A CSV or model file does not match its schema."""


class NumericalError(ArithmeticError):
    """Non-finite values or a diverged computation (CLI exit code 3)."""


class InsufficientHistory(RuntimeError):
    """The online window is not full yet."""


class SingularDynamicsError(NumericalError):
    """Backward rollout requested with a (near) singular A."""
