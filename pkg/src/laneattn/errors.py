"""Exception hierarchy shared by every module."""


class LaneAttnError(Exception):
    """Base class for all package errors."""


class DimensionError(LaneAttnError, ValueError):
    pass


class DomainError(LaneAttnError, ValueError):
    pass


class UsageError(LaneAttnError, ValueError):
    pass


class GeometryError(LaneAttnError, ValueError):
    pass


class LabelingError(LaneAttnError, ValueError):
    pass


class AttentionError(LaneAttnError, ValueError):
    pass


class NumericError(LaneAttnError, ArithmeticError):
    pass


class ConfigError(LaneAttnError, ValueError):
    pass


class DataError(LaneAttnError):
    """Malformed or unusable input data (CSV rows, map JSON, scene files)."""


class CheckpointError(LaneAttnError):
    pass
