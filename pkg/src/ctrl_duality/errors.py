"""Exception types shared across the package."""


class CtrlDualityError(Exception):
    """Base class for all package errors."""


class ConfigError(CtrlDualityError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class NumericalError(CtrlDualityError):
    """A numerical procedure failed or produced unusable output (CLI exit code 3)."""
