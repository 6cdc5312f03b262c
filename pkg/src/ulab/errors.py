"""Exception hierarchy. The CLI maps these onto its exit codes."""


class UlabError(Exception):
    """Base class for all library errors."""


class ConfigError(UlabError, ValueError):
    """Invalid input, configuration or contract violation (exit code 2)."""


class NumericalError(UlabError, RuntimeError):
    """A numerical routine failed to converge or produced non-finite values (exit code 3)."""


class FormatError(UlabError, OSError):
    """A file on disk does not match its declared layout (exit code 4)."""
