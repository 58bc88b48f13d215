"""Exception hierarchy. The CLI maps each family onto an exit code."""


class EchoKVError(Exception):
    exit_code = 1


class ConfigError(EchoKVError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Array shapes disagree with each other or with the configured geometry."""


class UsageError(ConfigError):
    pass


class InputError(ConfigError):
    pass


class TrainingError(EchoKVError, RuntimeError):
    exit_code = 4
