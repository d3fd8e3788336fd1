"""Exception hierarchy. The CLI maps each family to an exit code."""


class BevMotionError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(BevMotionError, ValueError):
    exit_code = 2
    kind = "config"


class ShapeError(BevMotionError, ValueError):
    exit_code = 2
    kind = "shape"


class InvalidPoseError(BevMotionError, ValueError):
    exit_code = 2
    kind = "pose"


class EmptyInputError(BevMotionError, ValueError):
    """Matching is undefined when either point set is empty."""

    exit_code = 4
    kind = "empty-input"


class UnsupportedError(BevMotionError, ValueError):
    exit_code = 2
    kind = "unsupported"


class SolverError(BevMotionError, ArithmeticError):
    exit_code = 4
    kind = "numeric"


class InvalidCacheError(BevMotionError, RuntimeError):
    exit_code = 4
    kind = "cache"


class EmptyDatasetError(BevMotionError, ValueError):
    exit_code = 3
    kind = "empty-dataset"


class DatasetError(BevMotionError, IOError):
    exit_code = 3
    kind = "io"


class TruncatedFileError(DatasetError):
    kind = "truncated"


class ChecksumError(DatasetError):
    kind = "checksum"


class VersionError(DatasetError):
    exit_code = 5
    kind = "version"
