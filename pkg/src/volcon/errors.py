"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI lives in :mod:`volcon.cli`; library code
raises these types and never calls ``sys.exit`` itself.
"""


class VolconError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(VolconError):
    """Invalid configuration value, flag combination, or contract violation."""


class DataError(VolconError):
    """Input data violates an invariant (shape, range, dtype, NaN/Inf)."""


class FormatError(DataError):
    """Malformed file container (bad magic bytes, unsupported version)."""


class DegenerateBatchError(VolconError):
    """A contrastive batch has no anchor with at least one positive."""


class TrainingError(VolconError):
    """Training cannot proceed (for instance every batch is degenerate)."""


class MissingArtifactError(VolconError):
    """A required artifact (checkpoint, report, run directory) is missing."""
