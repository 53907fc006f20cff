"""
Exception hierarchy for BALISTD.

Usage errors (bad configuration, invalid inputs) map to CLI exit code 1,
runtime failures (non-finite numerics, broken state) map to exit code 2.
"""


class BalistdError(Exception):
    """Base class for all library errors"""
    exit_code = 2


class UsageError(BalistdError, ValueError):
    """Invalid configuration or input supplied by the caller"""
    exit_code = 1


class RuntimeFailure(BalistdError, RuntimeError):
    """Numerical or state failure during a computation"""
    exit_code = 2


class ConfigError(UsageError):
    pass


class CorruptionError(UsageError):
    pass


class MetricError(UsageError):
    pass


class DatasetError(UsageError):
    pass


class PolicyError(RuntimeFailure):
    pass


class DetectorError(RuntimeFailure):
    pass


class TrainingError(RuntimeFailure):
    pass


class CheckpointError(RuntimeFailure):
    pass
