"""Exception types raised across rainforge."""


class RainforgeError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(RainforgeError, ValueError):
    pass


class ContractError(RainforgeError, ValueError):
    """A precondition of an operation was violated by the caller."""


class EmptySupportError(InvalidArgumentError):
    pass


class UndefinedMetricError(RainforgeError, ValueError):
    pass


class FormatError(RainforgeError, ValueError):
    pass


class ConfigError(RainforgeError, ValueError):
    pass
