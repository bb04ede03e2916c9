"""
Toolkit Errors
Exception hierarchy shared by every pipeline stage
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 2


class ToolkitValidationError(ToolkitError):
    """Bad input: malformed documents, violated invariants, missing artifacts"""
    exit_code = 1


class ToolkitRuntimeError(ToolkitError):
    """Valid input that could not be processed"""
    exit_code = 2


# Validation family

class ParseError(ToolkitValidationError):
    """Malformed document or file contents"""


class ValidationError(ToolkitValidationError):
    """A record invariant is violated"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class UnsupportedFormat(ToolkitValidationError):
    """File format variant the loaders do not handle"""


class DimensionMismatch(ToolkitValidationError):
    """Image dimensions differ from the frame record"""


class UnknownMarkId(ToolkitValidationError):
    """A mark id that does not exist in the scene"""

    def __init__(self, mark_id: int):
        self.mark_id = mark_id
        super().__init__(f"unknown mark_id {mark_id}")


class MissingArtifact(ToolkitValidationError):
    """An upstream stage artifact is absent"""


class ConfigError(ToolkitValidationError):
    """Invalid run or gateway configuration"""


# Runtime family

class IoError(ToolkitRuntimeError):
    """A file could not be read or written"""


class EmptyCloud(ToolkitRuntimeError):
    """Operation needs at least one point"""


class DegenerateVector(ToolkitRuntimeError):
    """Vector norm below the degeneracy epsilon"""


class AmbiguousAngle(ToolkitRuntimeError):
    """Angle falls exactly on a direction-bin boundary"""


class TooManyTiles(ToolkitRuntimeError):
    """More images than a grid can hold"""


class EmptyInput(ToolkitRuntimeError):
    """Nothing to aggregate"""


class GenerationError(ToolkitRuntimeError):
    """A QA generator could not produce an item"""


class LabelAbsent(GenerationError):
    pass


class NoValidTriplet(GenerationError):
    pass


class NoUnambiguousReference(GenerationError):
    pass


class TooFewCandidates(GenerationError):
    pass


class NoValidPair(GenerationError):
    pass


class NoUnambiguousObject(GenerationError):
    pass


class NoValidRoute(GenerationError):
    pass


class GatewayError(ToolkitRuntimeError):
    """Model endpoint failure"""

    def __init__(self, message: str, attempt_count: int = 0):
        self.attempt_count = attempt_count
        super().__init__(message)


class TransportError(GatewayError):
    pass


class AuthError(GatewayError):
    pass


class MalformedResponse(GatewayError):
    pass
