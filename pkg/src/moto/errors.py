"""Exception hierarchy shared across the package, with CLI exit codes."""


class MotoError(Exception):
    """Base class for all package-specific failures."""

    exit_code = 1


class ConfigError(MotoError):
    """Invalid configuration file, key, or value."""

    exit_code = 2


class DataError(MotoError):
    """Dataset file missing, malformed, or inconsistent."""

    exit_code = 3


class EnvFailure(MotoError):
    """Environment produced an unusable transition (e.g. non-finite observation)."""

    exit_code = 4


class NumericalError(MotoError):
    """Non-finite values where finite math is required (logits, losses, decoders)."""

    exit_code = 5


class ReportError(MotoError):
    """Report generation failed (e.g. no checkpoints in run directory)."""

    exit_code = 6
