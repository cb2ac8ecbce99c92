"""Exception types shared across the toolkit."""


class TsganError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(TsganError):
    """Operand shapes are inconsistent with the operation's contract."""


class DomainError(TsganError):
    """An input value lies outside an operation's numeric domain."""


class ContractError(TsganError):
    """An API precondition was violated (e.g. non-scalar loss in backward)."""


class ConfigError(TsganError):
    """A configuration key, value, or combination is invalid."""


class DataFormatError(TsganError):
    """An input file violates its documented format."""


class ParseError(DataFormatError):
    """A malformed row or field; the message names the offending line."""


class DegenerateChannelError(TsganError):
    """A channel has zero variance and cannot be standardized."""


class CheckpointError(TsganError):
    """A checkpoint file is malformed, truncated, or version-incompatible."""


class TrainingError(TsganError):
    """Training hit a non-recoverable numeric failure (NaN loss or gradient)."""
