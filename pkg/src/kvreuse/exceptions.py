"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see cli.EXIT_CODES).
"""


class KVReuseError(Exception):
    """Base class for all package errors."""


class ConfigError(KVReuseError):
    """Invalid model or global configuration (bad dimension relations etc.)."""


class InputError(KVReuseError):
    """Caller-supplied inputs violate an operation's preconditions."""


class PlanError(KVReuseError):
    """A recompute plan violates the grid/monotonicity constraints."""


class StaleCacheError(KVReuseError):
    """Cache entry exists but was produced by a different model."""


class IntegrityError(KVReuseError):
    """Persisted data is corrupt (bad magic, truncated blob, checksum mismatch)."""


class ParseError(KVReuseError):
    """A text artifact (table, plan, config) could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SetupError(KVReuseError):
    """A required setup step (e.g. cache fill) has not been performed."""
