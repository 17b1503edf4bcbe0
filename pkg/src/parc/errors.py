"""Exception hierarchy shared by every parc module."""

from __future__ import annotations


class ParcError(Exception):
    """Base class for all errors raised by parc."""


class SchemaError(ParcError, ValueError):
    """A file or record does not match its expected structure."""

    def __init__(self, message: str, *, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ChecksumMismatch(SchemaError):
    pass


class ConstraintViolation(ParcError, ValueError):
    """A structurally valid config breaks a cross-field rule."""


# vector store
class DimensionMismatch(ParcError, ValueError):
    pass


class ZeroVector(ParcError, ValueError):
    pass


class NonFiniteEmbedding(ParcError, ValueError):
    pass


class EmptyPool(ParcError, ValueError):
    pass


# prompt engine
class MissingSlotValue(ParcError, KeyError):
    pass


class UnlabeledEntry(ParcError, ValueError):
    pass


class VerbalizerMiss(ParcError, KeyError):
    pass


class DanglingHitId(ParcError, KeyError):
    pass


class DuplicateTemplateId(SchemaError):
    pass


class UnknownTemplate(ParcError, KeyError):
    pass


# model gateway
class TransportError(ParcError):
    """The backend could not be reached; raised after retries are exhausted."""

    def __init__(self, message: str, *, attempts: int = 1) -> None:
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")


class Timeout(TransportError):
    pass


class BackendRejection(ParcError):
    """The backend answered but refused the request."""

    def __init__(self, message: str, *, status: int | None = None) -> None:
        self.status = status
        super().__init__(message)


class BackendKindError(ParcError, ValueError):
    pass


class NoMaskMarker(ParcError, ValueError):
    pass


# metrics
class LengthMismatch(ParcError, ValueError):
    pass


class UnknownLabel(ParcError, ValueError):
    pass


class EmptyMatrix(ParcError, ValueError):
    pass


class EmptyReference(ParcError, ValueError):
    pass


class LabelSetMismatch(ParcError, ValueError):
    pass


# runner
class CellError(ParcError):
    """A module error annotated with the sweep cell and example it came from."""

    def __init__(self, cause: Exception, *, template_id: str, k: int, example_id: str | None = None) -> None:
        self.cause = cause
        self.template_id = template_id
        self.k = k
        self.example_id = example_id
        where = f"template={template_id} k={k}"
        if example_id is not None:
            where += f" example={example_id}"
        super().__init__(f"[{where}] {type(cause).__name__}: {cause}")
