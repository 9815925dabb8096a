"""Exception taxonomy shared by all modules.

Each class carries the process exit code the CLI maps it to, so failures
surface with a stable, category-specific status.
"""


class RetinaForgeError(Exception):
    exit_code = 1


class ConfigError(RetinaForgeError, ValueError):
    """Invalid configuration value or unusable option combination."""

    exit_code = 2


class ShapeError(RetinaForgeError, ValueError):
    """Array shapes incompatible with the requested operation."""

    exit_code = 3


class DataError(RetinaForgeError):
    """Dataset content is inconsistent or unusable."""

    exit_code = 3


class DegenerateInputError(DataError):
    """Input is formally valid but degenerate (e.g. constant image, one-class labels)."""


class StateError(RetinaForgeError, RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""

    exit_code = 1


class StorageError(RetinaForgeError):
    """File could not be decoded, encoded, or read."""

    exit_code = 4


class ArchiveError(StorageError):
    """Weight archive is unreadable."""


class TruncatedArchiveError(ArchiveError):
    pass


class ChecksumError(ArchiveError):
    pass


class SpecMismatchError(ArchiveError):
    pass


class VerificationError(RetinaForgeError):
    """A self-check (parameter budget, gradient suite) failed."""

    exit_code = 5
