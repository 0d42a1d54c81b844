"""Exception taxonomy shared across the package."""


class CtxsegError(Exception):
    """Base class for all package errors."""


class DimensionError(CtxsegError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(CtxsegError, ValueError):
    """A configuration value violates its contract."""


class ContractError(CtxsegError, ValueError):
    """A runtime precondition was violated (bad inputs, empty masks, ...)."""


class ParseError(CtxsegError, ValueError):
    """A file could not be parsed; message carries location info."""
