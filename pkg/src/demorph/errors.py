"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class DemorphError(Exception):
    exit_code = 1


class ConfigError(DemorphError, ValueError):
    exit_code = 2


class DimensionError(DemorphError, ValueError):
    exit_code = 2


class DataError(DemorphError, ValueError):
    exit_code = 3


class SplitError(DataError):
    def __init__(self, message, identities=()):
        super().__init__(message)
        self.identities = sorted(identities)


class MetricError(DataError):
    pass


class TrainingDivergedError(DemorphError, RuntimeError):
    exit_code = 3


class IntegrityError(DemorphError):
    exit_code = 4


class ModeError(ConfigError):
    pass
