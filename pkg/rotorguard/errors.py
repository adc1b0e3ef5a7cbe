"""Exception types raised across the flight stack."""


class RotorguardError(Exception):
    """Base class for all rotorguard errors."""


class ConfigError(RotorguardError, ValueError):
    """A configuration value is missing, malformed or out of range.

    Args:
        field_path: Dotted path of the offending field, e.g. "controller.horizon".
        message: Human readable explanation.
    """

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        self.message = message
        super().__init__(f"{field_path}: {message}")


class InfeasibleFailureError(ConfigError):
    """Post-failure flight is impossible with the configured thrust limit."""


class InvalidInputError(RotorguardError, ValueError):
    """A numerical input is non-finite or violates an operation's precondition."""


class InvalidStateError(RotorguardError, ValueError):
    """A vehicle state violates its invariants (e.g. non-unit quaternion)."""


class QueryError(RotorguardError, ValueError):
    """A map query was made outside the world bounds."""


class PlanningError(RotorguardError):
    """Path search or trajectory optimization could not produce a valid result."""


class WorldGenerationError(RotorguardError):
    """A procedural world could not satisfy its feasibility guarantees."""


class LogFormatError(RotorguardError, ValueError):
    """A run log is missing columns or cannot be parsed."""


class RunDivergedError(RotorguardError):
    """The closed-loop simulation produced a non-finite state."""
