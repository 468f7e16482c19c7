"""Exception types shared across the package."""


class InputError(ValueError):
    """An argument is outside the domain an operation accepts."""


class UsageError(TypeError):
    """An operation was called without something it needs (e.g. a hard label)."""


class ConfigError(ValueError):
    """A configuration document or generator setting is invalid."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss.

    Carries the offending scene id and loss term so the CLI can report them.
    """

    def __init__(self, message, scene_id=None, term=None):
        super().__init__(message)
        self.scene_id = scene_id
        self.term = term


class OracleFailure(RuntimeError):
    """The finite-difference oracle could not evaluate the function."""
