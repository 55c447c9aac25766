"""Exception hierarchy shared by every module.

Each class carries a short ``code`` string; the command-line front end prints it
so that failures can be matched by scripts.
"""


class TVFLError(Exception):
    code = "tvfl_error"


class ConfigError(TVFLError, ValueError):
    code = "invalid_config"


class DomainError(TVFLError, ValueError):
    code = "domain_error"


class PreconditionError(TVFLError, ValueError):
    code = "precondition_failed"


class DimensionMismatchError(TVFLError, ValueError):
    code = "dimension_mismatch"


class CoincidentPositionError(TVFLError, ValueError):
    code = "coincident_position"


class DatasetFormatError(TVFLError):
    code = "dataset_format"


class MalformedHeaderError(DatasetFormatError):
    code = "malformed_header"


class TruncatedPayloadError(DatasetFormatError):
    code = "truncated_payload"


class CheckpointFormatError(TVFLError):
    code = "checkpoint_format"


class StaleCacheError(TVFLError, RuntimeError):
    code = "stale_cache"


class DivergenceError(TVFLError, FloatingPointError):
    code = "diverged"


class UnreachableTargetError(TVFLError, ValueError):
    code = "unreachable_target"


class ConvergedError(TVFLError, ArithmeticError):
    """Raised when every gradient block is zero, so the block weights are undefined."""

    code = "converged"
