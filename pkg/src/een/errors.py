"""Exception hierarchy shared across the package."""


class EENError(Exception):
    """Base class for all package errors."""


class DimensionError(EENError, ValueError):
    pass


class RankError(EENError, ValueError):
    pass


class NoTapeError(EENError, RuntimeError):
    pass


class DegenerateBatchError(EENError, ValueError):
    pass


class OptimizerError(EENError, RuntimeError):
    pass


class LatentError(EENError, ValueError):
    pass


class LifecycleError(EENError, RuntimeError):
    """An operation was requested out of order (e.g. residual before snapshot)."""


class DataError(EENError, ValueError):
    pass


class ConfigError(EENError, ValueError):
    """Invalid configuration. ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
