"""Exception hierarchy shared by all ndmag modules."""


class NdmagError(Exception):
    """Base class for every error raised by ndmag."""


class InvalidInputError(NdmagError, ValueError):
    pass


class ManifestNotFoundError(NdmagError, FileNotFoundError):
    pass


class InconsistentStackError(NdmagError):
    pass


class CorruptFrameError(NdmagError):
    def __init__(self, message, frame_index=None):
        super().__init__(message)
        self.frame_index = frame_index


class InvalidRecordError(NdmagError, ValueError):
    pass


class InsufficientStructureError(NdmagError):
    """Spectrum has too few prominent dips to seed a fit."""


class NotConvergedError(NdmagError):
    pass


class DegenerateDataError(NdmagError, ValueError):
    pass


class RankDeficientError(NdmagError, ValueError):
    pass


class SingularityError(NdmagError, ValueError):
    """Field evaluated too close to a line current."""


class SceneError(NdmagError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class ConfigError(NdmagError, ValueError):
    pass
