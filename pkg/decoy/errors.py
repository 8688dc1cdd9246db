"""Exception hierarchy shared by the library and the CLI."""

from typing import Optional


class DecoyError(Exception):
    """Base class for every error raised by decoy."""


class NonFiniteError(DecoyError):
    """A loss or gradient became NaN/Inf (usually a learning rate that is too high)."""


class DegenerateLayerError(DecoyError):
    """An all-zero layer has no defined quantization scale."""


class OutOfRangeError(DecoyError):
    """A bit address lies outside the image payload."""


class UnknownCoordinateError(DecoyError):
    """A weight coordinate is not present in the coordinate map."""


class AssemblyParseError(DecoyError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class AssemblyRangeError(DecoyError):
    """A jump displacement does not fit its (forced) encoding."""


class NotConditionalError(DecoyError):
    """The opcode is not a conditional jump."""


class ImageCorruptError(DecoyError):
    """An image no longer matches its recorded digest."""


class NonIdempotentActivationError(DecoyError):
    """A dummy layer cannot follow an activation that is not idempotent."""


class BoundaryLayerError(DecoyError):
    """Dummy neurons cannot cross a flatten boundary or extend the final layer."""


class NotInstructionBoundaryError(DecoyError):
    """The offset does not start an instruction."""


class RetriesExhaustedError(DecoyError):
    """Pattern generation found no acceptable layout within the retry budget."""


class StaleLocationError(DecoyError):
    """A pattern was generated for a different image."""


class FormatError(DecoyError):
    """A persisted file has a bad magic, version or layout."""


class ConfigError(DecoyError):
    """An experiment config key is missing, unknown or out of range."""


class StageError(DecoyError):
    def __init__(self, stage: str, cause: Optional[BaseException] = None):
        message = f"stage '{stage}' failed"
        if cause is not None:
            message += f": {cause}"
        super().__init__(message)
        self.stage = stage
        self.cause = cause
