"""Exception hierarchy."""


class EarlyExitError(Exception):
    """Base class for all package errors."""


class ConfigError(EarlyExitError, ValueError):
    pass


class InputError(EarlyExitError, ValueError):
    pass


class LayerRangeError(EarlyExitError, ValueError):
    pass


class LoadError(EarlyExitError, ValueError):
    """Weight file could not be loaded."""


class MalformedHeaderError(LoadError):
    pass


class DimensionMismatchError(LoadError):
    pass


class NonFiniteError(LoadError):
    pass


class PlantError(EarlyExitError, ValueError):
    """Requested planted model cannot be built."""


class SpecError(EarlyExitError, ValueError):
    """Invalid match spec or task file."""


class DatasetError(EarlyExitError, ValueError):
    pass


class ProfileError(EarlyExitError, ValueError):
    pass


class ReportError(EarlyExitError, ValueError):
    pass
