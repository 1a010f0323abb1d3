"""Exception types shared across the package."""


class AttentionGeometryError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AttentionGeometryError, ValueError):
    pass


class UndefinedScoreError(AttentionGeometryError, ValueError):
    """A score whose defining ratio has a zero denominator."""


class EmptyInputError(AttentionGeometryError, ValueError):
    pass


class ContainerParseError(AttentionGeometryError, ValueError):
    """Malformed tensor container. ``position`` is the byte offset of the fault."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at byte {position})")
        self.position = position


class PatternMatchError(AttentionGeometryError, KeyError):
    """A layer pattern that selects no tensors, or misses one it needs."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""
