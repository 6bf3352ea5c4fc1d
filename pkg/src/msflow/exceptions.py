"""Exception types raised by msflow.

Invalid arguments raise :class:`ValueError`; the classes here cover the
remaining failure modes.
"""


class CloudFormatError(ValueError):
    """A point-cloud file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class PSDViolationError(RuntimeError):
    """The bridge covariance has a negative eigenvalue for this schedule."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss!r})")
        self.step = step
        self.loss = loss


class TrajectoryDivergedError(RuntimeError):
    def __init__(self, step, stage=None):
        msg = f"non-finite state at Euler step {step}"
        if stage is not None:
            msg += f" of stage {stage}"
        super().__init__(msg)
        self.step = step
        self.stage = stage
