"""Exception hierarchy shared by all stages."""


class FreeSpaceError(Exception):
    """Base class for every error raised by this package."""


class InvalidMeasurementError(FreeSpaceError, ValueError):
    pass


class FormatError(FreeSpaceError, ValueError):
    """An input file does not match its declared format."""


class LikelihoodError(FreeSpaceError, ValueError):
    pass


class FitError(FreeSpaceError, ValueError):
    """Least-squares or RANSAC fit could not be computed."""


class EstimationError(FreeSpaceError, ValueError):
    """Inter-frame transform could not be estimated."""


class GridModeError(FreeSpaceError, ValueError):
    pass


class ConfigError(FreeSpaceError, ValueError):
    pass


class PipelineError(FreeSpaceError):
    """A pipeline stage failed; carries the frame index and stage name."""

    def __init__(self, frame, stage, cause):
        self.frame = frame
        self.stage = stage
        self.cause = cause
        super().__init__(f"frame {frame}, stage '{stage}': {cause}")
