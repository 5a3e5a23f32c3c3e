"""Exception hierarchy shared by every module."""


class BimodalError(ValueError):
    """Base class for all library errors."""


class FormatError(BimodalError):
    """Malformed input bytes or text."""


class UnsupportedError(BimodalError):
    """Well-formed input using an encoding the library does not read."""


class ManifestError(BimodalError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class VersionError(BimodalError):
    pass


class IntegrityError(BimodalError):
    pass


class ParameterError(BimodalError):
    pass


class InsufficientDataError(BimodalError):
    pass


class ResolutionError(BimodalError):
    pass


class SingularityError(BimodalError):
    pass


class RankError(BimodalError):
    pass


class DegenerateRangeError(BimodalError):
    pass


class UndefinedScoreError(BimodalError):
    pass
