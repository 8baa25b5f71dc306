"""Exception types raised across the package."""


class V2AError(Exception):
    """Base class for all package errors."""


class ContractError(V2AError, ValueError):
    """A precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class FormatError(V2AError, ValueError):
    """A binary or manifest file is malformed."""


class HeaderError(FormatError):
    pass


class LengthError(FormatError):
    """Payload is shorter or longer than the header claims."""


class MigrationError(FormatError):
    """Checkpoint was written by an unsupported format version."""


class ConsistencyError(V2AError, ValueError):
    """Files referenced together disagree (e.g. embedding width)."""


class EmptySequenceError(ContractError):
    pass


class NormalizationError(ContractError):
    pass


class InsufficientDataError(ContractError):
    pass


class VariantError(ContractError):
    """Operation does not support the model variant it was given."""
