"""Exception types raised across the package."""


class RaymemError(Exception):
    """Base class for all errors raised by raymem."""


class GeometryError(RaymemError, ValueError):
    pass


class LogSingularityError(GeometryError):
    def __init__(self, angle: float):
        super().__init__(f"rotation near log singularity (angle={angle:.9f} rad)")
        self.angle = angle


class DegenerateCorrespondenceError(GeometryError):
    def __init__(self, detail: str = ""):
        msg = "degenerate correspondence set"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class ConfigError(RaymemError, ValueError):
    """Invalid configuration value. ``line`` is set when parsed from a file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class StaleIdError(RaymemError, KeyError):
    def __init__(self, pointer_id: int):
        super().__init__(f"stale id {pointer_id}")
        self.pointer_id = pointer_id

    def __str__(self) -> str:
        return self.args[0]


class FrameOrderError(RaymemError, ValueError):
    def __init__(self, expected: str, got: int):
        super().__init__(f"non-monotone frame: expected {expected}, got {got}")


class DegenerateLoopError(RaymemError):
    def __init__(self, detail: str = ""):
        msg = "degenerate loop constraint"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class DivergedError(RaymemError):
    def __init__(self, iteration: int):
        super().__init__(f"diverged at iteration {iteration}: non-finite cost")
        self.iteration = iteration


class StreamFormatError(RaymemError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
