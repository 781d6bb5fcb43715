"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so raising the right one
matters more than usual: configuration problems must not masquerade as
data problems and vice versa.
"""


class CuefeedError(Exception):
    """Base class for package errors."""


class ConfigError(CuefeedError):
    """Invalid or inconsistent run configuration."""


class DataError(CuefeedError):
    """Missing or malformed dataset input (manifest, image, mask, ...)."""


class NumericError(CuefeedError):
    """Non-finite values or numerically impossible state at runtime."""
