"""Exception classes shared across the package."""


class CtabdError(Exception):
    """Base class for all package errors."""


class ParameterError(CtabdError, ValueError):
    """An argument value violates a documented precondition."""


class ShapeError(CtabdError, ValueError):
    """Array shapes are inconsistent with the operation's contract."""


class GridBoundsError(CtabdError, ValueError):
    """A box or index falls outside the grid it is applied to."""


class StateError(CtabdError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class FormatError(CtabdError, ValueError):
    """An on-disk artifact does not match its declared layout."""


class MaskValidationError(CtabdError, ValueError):
    """Stored label values fall outside the documented code range."""


class ConfigError(CtabdError, ValueError):
    """A configuration document is malformed or inconsistent."""


class MissingInputError(CtabdError, FileNotFoundError):
    """A pipeline stage's input artifact does not exist yet."""

    def __init__(self, path, stage: str = ""):
        self.path = str(path)
        self.stage = stage
        hint = f" (required by stage {stage!r})" if stage else ""
        super().__init__(f"missing input: {self.path}{hint}")
