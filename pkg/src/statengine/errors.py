"""Exception types shared across the package."""


class StatEngineError(Exception):
    """Base class for errors raised by this package."""


class FormatError(StatEngineError, ValueError):
    """A text or binary input file could not be parsed.

    ``line`` is the 1-based line number when the input is line oriented.
    """

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class MemoryCapError(StatEngineError, MemoryError):
    """A requested representation would exceed the configured memory cap."""


class PlanError(StatEngineError, ValueError):
    """An execution plan cannot be built for the given inputs."""


class NumericalError(StatEngineError, ArithmeticError):
    """The model left the finite range (usually: step size too large)."""


class WorkerError(StatEngineError, RuntimeError):
    """A worker thread raised during an epoch."""

    def __init__(self, epoch, worker, cause):
        self.epoch = epoch
        self.worker = worker
        super().__init__(f"worker {worker} failed in epoch {epoch}: {cause!r}")


class CalibrationError(StatEngineError, RuntimeError):
    """A calibration trial was too small to time reliably."""
