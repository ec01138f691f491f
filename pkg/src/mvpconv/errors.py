"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class UnknownOutputError(ContractViolation):
    """The requested output tensor was never produced on the tape."""


class OracleFailure(RuntimeError):
    """The finite-difference oracle hit a non-finite evaluation."""


class FormatError(ValueError):
    """A file does not match its declared on-disk format."""


class TruncationError(FormatError):
    """A file ended before its header-declared payload was complete."""


class ConfigError(ValueError):
    """A configuration value is unusable (unknown id, bad range)."""


class OptimizerError(RuntimeError):
    """The optimizer refused a step, e.g. on non-finite gradients."""


class TrainingError(RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""
