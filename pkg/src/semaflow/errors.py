"""Exception hierarchy shared by all semaflow subsystems."""

from __future__ import annotations


class SemaflowError(Exception):
    """Base class for all errors raised by this package."""


# --- tag hierarchy / type system ---

class UnknownTagError(SemaflowError):
    pass


class DuplicateTagError(SemaflowError):
    pass


class UnknownParentError(SemaflowError):
    pass


class HierarchyFrozenError(SemaflowError):
    pass


class HierarchyNotFrozenError(SemaflowError):
    pass


class TypeExprError(SemaflowError):
    """Malformed type expression text."""


class InvalidDimError(SemaflowError):
    """Axis dimension outside the permitted range (must be >= 1)."""


# --- module descriptors / registry ---

class DuplicateDescriptorError(SemaflowError):
    pass


class UnknownDescriptorError(SemaflowError):
    pass


class InvalidCompositeError(SemaflowError):
    """A composite descriptor's internal sub-graph failed validation."""


class MissingParamError(SemaflowError):
    pass


class UnknownParamError(SemaflowError):
    pass


class ConstraintViolationError(SemaflowError):
    """Carries the parameter name and the constraint text that failed."""

    def __init__(self, name: str, constraint: str, value=None):
        self.name = name
        self.constraint = constraint
        self.value = value
        super().__init__(f"{name} {constraint} (got {value!r})")


class RecursionLimitError(SemaflowError):
    """Composite expansion exceeded the nesting limit; the registry is corrupt."""


# --- graph construction ---

class ConnectionTypeError(SemaflowError):
    """A producer/consumer pair failed the semantic type comparison.

    Carries the comparison result and both types rendered in the type
    expression grammar so diagnostics can be tested as golden text.
    """

    def __init__(self, result, producer_type: str, consumer_type: str,
                 from_ref: str = "?", to_ref: str = "?"):
        self.result = result
        self.producer_type = producer_type
        self.consumer_type = consumer_type
        self.from_ref = from_ref
        self.to_ref = to_ref
        super().__init__(
            f"{result.name} at {from_ref} -> {to_ref}: "
            f"{producer_type} vs {consumer_type}"
        )


class PortAlreadyBoundError(SemaflowError):
    pass


class UnknownPortError(SemaflowError):
    pass


class UnknownInstanceError(SemaflowError):
    pass


class DuplicateInstanceError(SemaflowError):
    pass


class NotValidatedError(SemaflowError):
    pass


class SchemaError(SemaflowError):
    """Malformed graph/descriptor/tag document. Carries a JSON-path context."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


# --- backend execution ---

class ShapeMismatchError(SemaflowError):
    def __init__(self, instance: str, port: str, expected, actual):
        self.instance = instance
        self.port = port
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"shape mismatch at {instance}.{port}: expected {expected}, got {actual}"
        )


class NonFiniteValueError(SemaflowError):
    def __init__(self, instance: str):
        self.instance = instance
        super().__init__(f"non-finite value produced by instance {instance!r}")


class NonScalarSinkError(SemaflowError):
    pass


class TooManyParametersError(SemaflowError):
    pass


# --- runtime actions ---

class NoScalarLossError(SemaflowError):
    pass


class DataExhaustedError(SemaflowError):
    pass


class DataFormatError(SemaflowError):
    """Source data violates the data layer's declared schema."""


class CheckpointFormatError(SemaflowError):
    pass


class ActionError(SemaflowError):
    pass
