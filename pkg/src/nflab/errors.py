"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible; message names both shapes."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ParseError(ValueError):
    """A manifest or config file could not be parsed."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint container failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible container version."""


class CheckpointChecksumError(CheckpointError):
    """Checkpoint payload does not match its recorded checksum."""


class TrainingDivergedError(RuntimeError):
    """A non-finite loss was produced; message names the first bad tensor."""
