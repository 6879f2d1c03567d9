"""Exception hierarchy shared across the package."""


class AttributionError(Exception):
    """Base class for every error raised by advattrib."""


class DimensionError(AttributionError, ValueError):
    pass


class LabelError(AttributionError, ValueError):
    pass


class ContractError(AttributionError, ValueError):
    pass


class FormatError(AttributionError, ValueError):
    pass


class TruncatedFileError(FormatError, OSError):
    """A binary blob ended before its header said it would."""


class ConsistencyError(AttributionError, ValueError):
    pass


class TrainingError(AttributionError, RuntimeError):
    pass


class SpecError(AttributionError, ValueError):
    pass


class ForgeError(AttributionError, RuntimeError):
    pass


class ConfigError(AttributionError, ValueError):
    pass


class MissingArtifactError(AttributionError, FileNotFoundError):
    pass
