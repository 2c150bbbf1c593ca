"""Exception hierarchy shared across the package."""

from __future__ import annotations

from typing import Any


class SitarError(Exception):
    """Root of all sitar-lab failures."""


class ShapeError(SitarError, ValueError):
    """An operation received operands of incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = "") -> None:
        rendered = ", ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {rendered}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)
        self.op = op
        self.shapes = shapes


class NonFiniteError(SitarError, FloatingPointError):
    """A computation produced NaN or infinity."""


class TrainingDivergedError(NonFiniteError):
    """Training hit a non-finite loss. ``state`` holds the last good parameters."""

    def __init__(self, message: str, state: Any) -> None:
        super().__init__(message)
        self.state = state


class IdxFormatError(SitarError, ValueError):
    """An IDX file is malformed."""


class ContainerFormatError(SitarError, ValueError):
    """A dataset container or checkpoint file is malformed."""


class DatasetError(SitarError, ValueError):
    """A dataset or batch does not satisfy an operation's preconditions."""


class TheoryCheckError(SitarError, AssertionError):
    """Two algebraically equal forms of a penalty disagree numerically."""
