"""Exception hierarchy shared across the package."""


class PMformerError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(PMformerError, ValueError):
    pass


class ParameterError(PMformerError, ValueError):
    pass


class ContractError(PMformerError, ValueError):
    pass


class ConfigError(PMformerError, ValueError):
    pass


class DataError(PMformerError, ValueError):
    pass


class TrainingError(PMformerError, RuntimeError):
    pass


class CheckpointError(PMformerError, IOError):
    pass
