"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A configuration object or flag combination is invalid."""


class TeacherStudentMismatchError(ConfigurationError):
    """The teacher model cannot distill into the given student model."""


class DatasetError(ValueError):
    """A dataset directory, manifest, or record is malformed."""


class CheckpointError(ValueError):
    """A checkpoint does not match the expected on-disk layout."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss.

    Carries a ``record`` dict describing the iteration at which training
    diverged so callers can persist a diagnostic.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}


class DegenerateBoxError(ValueError):
    """A box collapsed below the minimum usable area after clipping."""
