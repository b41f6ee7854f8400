class ForgeError(Exception):
    """Base class for all package errors."""


class ConfigError(ForgeError, ValueError):
    pass


class DegenerateCloudError(ForgeError, ValueError):
    pass


class UnknownShapeError(ForgeError, KeyError):
    pass


class FormatError(ForgeError, ValueError):
    """Bad magic, truncated payload, or inconsistent counts in a binary/JSON file."""


class ShapeError(ForgeError, ValueError):
    pass


class DataError(ForgeError, ValueError):
    pass


class DegenerateFeatureError(ForgeError, ValueError):
    pass


class StaleCacheError(ForgeError, RuntimeError):
    pass


class ProtocolError(ForgeError, RuntimeError):
    """Session-order or class-visibility violation."""


class ManifestError(ForgeError, ValueError):
    pass


class MetricError(ForgeError, ValueError):
    pass
