"""Exception types shared across the package."""


class EmptyStateError(ValueError):
    """A joint state was built with no amplitude entries."""


class NotSubnormalizedError(ValueError):
    """State norm-squared exceeds 1 beyond tolerance."""


class DuplicateLabelError(ValueError):
    """The same label pair appears twice in a state definition."""


class MapPartyMismatchError(ValueError):
    """A linear map rule touches labels of the wrong party."""


class MapNotSubnormalizedError(ValueError):
    """A linear map row has total output power above 1."""


class UnresolvedChannelError(ValueError):
    """Outcome probabilities requested while a label has no detector channel."""


class UnsortedInputError(ValueError):
    """Click streams passed to coincidence search must be time-sorted."""


class ZeroCountsError(ValueError):
    """Visibility requested from zero total counts."""


class FitDivergedError(RuntimeError):
    """Nonlinear fringe fit failed to converge."""


class InsufficientSpanError(ValueError):
    """Fringe fit input does not cover enough of a period."""


class NoConvergenceError(RuntimeError):
    """Calibration hit its iteration cap without reaching tolerance."""


class ConfigParseError(ValueError):
    """Malformed line in a configuration file."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class UnknownKeyError(ValueError):
    """Configuration key does not map to any setup field."""


class InvariantViolationError(ValueError):
    """A configuration value violates a field invariant."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class EmptyOutputError(ValueError):
    """Nothing to write."""
