"""Exception types raised across the package."""


class PowerDPError(Exception):
    """Base class for all library errors."""


class InvalidTopologyError(PowerDPError, ValueError):
    pass


class ZeroCompensationError(PowerDPError):
    """A receiver's neighborhood contributes no transmit power."""


class NoConvergenceError(PowerDPError):
    pass


class DegenerateZError(PowerDPError):
    """Some z_ii is non-positive, so 1/z_ii cannot be bounded."""


class InvalidDeltaError(PowerDPError, ValueError):
    pass


class NotNeighborsError(PowerDPError, ValueError):
    pass


class InfeasibleError(PowerDPError):
    pass


class NoFixedPointError(PowerDPError):
    def __init__(self, message: str, theta_prev: float, theta_last: float):
        super().__init__(message)
        self.theta_prev = theta_prev
        self.theta_last = theta_last


class DimensionMismatchError(PowerDPError, ValueError):
    pass


class SingularSystemError(PowerDPError):
    pass


class MissingNeighborSignalError(PowerDPError):
    pass


class ZeroAlphaError(PowerDPError):
    pass


class NoOracleError(PowerDPError):
    pass


class BadMagicError(PowerDPError, ValueError):
    pass


class TruncatedPayloadError(PowerDPError, ValueError):
    pass


class UnsupportedTypeError(PowerDPError, ValueError):
    pass


class ArtifactsMissingError(PowerDPError):
    pass


class ConfigError(PowerDPError, ValueError):
    """Config validation failure; ``field`` names the offending key path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
