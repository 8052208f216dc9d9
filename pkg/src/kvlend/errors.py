class KvlendError(Exception):
    """Base class for errors raised by this package."""


class ContractError(KvlendError, ValueError):
    """A caller broke an operation's precondition (shapes, ranges, bounds)."""


class RejectedInputError(KvlendError, ValueError):
    """Input is well-formed but carries values we refuse (NaN, inf, negatives)."""


class ConfigError(KvlendError, ValueError):
    """Configuration or input file failed validation."""
