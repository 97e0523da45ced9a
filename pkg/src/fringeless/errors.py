"""Exception hierarchy. Each family maps onto one CLI exit code."""


class FringelessError(Exception):
    exit_code = 4


class DomainError(FringelessError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class RegimeError(FringelessError, ValueError):
    """Input outside the small-modulation regime the analysis relies on."""


class ConfigurationError(FringelessError, ValueError):
    exit_code = 2


class IngestionError(FringelessError, ValueError):
    exit_code = 3


class ProvenanceError(FringelessError, ValueError):
    """A trace was paired with a plan it was not generated from."""


class PrecisionError(FringelessError, ValueError):
    """Not enough data for the requested filter to settle."""


class PlacementError(FringelessError, ValueError):
    """Noise-floor offset collides with a modulation harmonic."""


class InsufficientDataError(FringelessError, ValueError):
    pass
