"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage/spec problems exit 2, data and
file-format problems exit 3, numeric verification failures exit 1.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes or the wrong rank."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class IngestionError(ValueError):
    """A CSV file could not be parsed into a series frame."""


class SpecError(ValueError):
    """A synthetic-dataset spec is malformed or inconsistent."""


class PlanError(ValueError):
    """An anomaly-injection plan cannot be realized on the frame."""


class DataError(ValueError):
    """Input data is structurally valid but unusable (too short, wrong N, ...)."""


class CheckpointError(ValueError):
    """A checkpoint file is not readable: bad magic, version, or checksum."""
