"""Exception types shared across the package.

Each class maps to one failure family so that the CLI can translate them
into exit codes: contract/config/shape/domain problems exit with 1, I/O and
file-format problems exit with 2.
"""


class DfkdError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ShapeError(DfkdError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class DomainError(DfkdError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ContractError(DfkdError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(DfkdError, ValueError):
    """A configuration is invalid or inconsistent."""


class FormatError(DfkdError):
    """A file could not be parsed."""

    exit_code = 2


class CheckpointError(FormatError):
    """Base for checkpoint integrity failures; ``code`` distinguishes them."""

    code = "checkpoint"


class BadMagicError(CheckpointError):
    code = "bad-magic"


class BadVersionError(CheckpointError):
    code = "bad-version"


class ChecksumError(CheckpointError):
    code = "bad-checksum"
