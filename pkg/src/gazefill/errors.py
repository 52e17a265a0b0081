"""Error types with machine-readable categories for the CLI."""


class GazefillError(Exception):
    """Base class; `category` is emitted by the CLI as a stable error tag."""

    category = "runtime"


class ConfigError(GazefillError):
    category = "config"


class DataError(GazefillError):
    category = "data"


class MalformedLandmarksError(DataError):
    """Landmark record is missing points or has out-of-range coordinates."""


class ShapeMismatchError(GazefillError, ValueError):
    category = "shape"


class CheckpointError(GazefillError):
    category = "io"


class MissingWeightsError(ConfigError):
    """An external perceptual backend was requested without a weights file."""


class TrainingDivergedError(GazefillError):
    """A loss became non-finite; the last good checkpoint is retained."""

    category = "training"
