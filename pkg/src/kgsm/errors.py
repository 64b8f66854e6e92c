"""Exception types raised across the package."""


class KgsmError(Exception):
    """Base class for all package errors."""


class NonPositivePower(KgsmError, ValueError):
    """A linear power value was <= 0 where a logarithm is required."""


class NegativeResidual(KgsmError, ValueError):
    """Observed power minus the vegetation term left nothing for the soil."""


class DimensionMismatch(KgsmError, ValueError):
    pass


class EmptyBatch(KgsmError, ValueError):
    pass


class EmptyInput(KgsmError, ValueError):
    pass


class DegenerateInput(KgsmError, ValueError):
    pass


class NonFiniteLoss(KgsmError, FloatingPointError):
    pass


class MissingFeature(KgsmError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class SchemaError(KgsmError, ValueError):
    pass


class InvariantViolation(KgsmError, ValueError):
    pass


class TooFewSites(KgsmError, ValueError):
    pass


class ConfigError(KgsmError, ValueError):
    pass


class CheckpointVersionError(KgsmError, ValueError):
    pass
