"""Exception taxonomy shared across the package.

Validation problems that a caller can fix (bad config values, malformed
records, horizons that are too short) raise subclasses of
:class:`WardflowError`; anything else escaping the package is a bug.
"""


class WardflowError(Exception):
    """Base class for all errors raised deliberately by this package."""


class StructuralError(WardflowError):
    """Shape or index mismatch between arrays and the declared state space."""


class ConfigurationError(WardflowError):
    """A configuration value is out of range or inconsistent."""


class DataError(WardflowError):
    """An input record cannot be interpreted (ingestion, schema, labels)."""


class SchemaError(DataError):
    """A serialized artifact has the wrong schema or version."""


class HorizonError(WardflowError):
    """A truncation horizon is too short for the requested tolerance."""


class GeneratorError(WardflowError):
    """A sampling spec cannot produce finite trajectories."""


class InfeasibleError(WardflowError):
    """The scheduling instance admits no feasible plan.

    ``binding_family`` names the constraint family that makes the instance
    infeasible ("blocking", "off_unit", "volume_bounds") when it could be
    identified.
    """

    def __init__(self, message, binding_family=None):
        super().__init__(message)
        self.binding_family = binding_family
