"""
Exceptions used by the tensor engine, the model and the tooling around them.
"""


class DrmimError(Exception):
    pass


class DimensionError(DrmimError):
    """
    Raised when tensor extents are incompatible with an operation.
    """
    def __init__(self, op_name, detail):
        self.op_name = op_name
        self.detail = detail
        self.message = f"{op_name}: {detail}"
        super().__init__(self.message)

    def __str__(self):
        return self.message


class DomainError(DrmimError):
    """
    Raised when a value lies outside the domain of a function, e.g. log of a non-positive number.
    """
    pass


class ContractError(DrmimError):
    """
    Raised when a caller breaks a precondition that is not about shapes,
    e.g. a non-scalar loss handed to backward or a batch too small for negative sampling.
    """
    pass


class ConfigurationError(DrmimError):
    pass


class CheckpointError(DrmimError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class SequenceParseError(DrmimError):
    """
    Raised when a sequence directory or annotation file cannot be parsed.
    """
    def __init__(self, path, line_number, detail):
        self.path = path
        self.line_number = line_number
        self.detail = detail
        if line_number is None:
            self.message = f"{path}: {detail}"
        else:
            self.message = f"{path}:{line_number}: {detail}"
        super().__init__(self.message)

    def __str__(self):
        return self.message


class NonFiniteLossError(DrmimError):
    """
    Raised by the trainer when the total loss stops being finite. Carries the diagnostic record.
    """
    def __init__(self, record):
        self.record = record
        self.message = f"Non-finite loss at step {record.step}: {record.as_dict()}"
        super().__init__(self.message)

    def __str__(self):
        return self.message


class TrainingIOError(DrmimError):
    """
    Raised when reading or writing training artifacts fails. Carries the step at which it happened.
    """
    def __init__(self, step, path, cause):
        self.step = step
        self.path = path
        self.cause = cause
        self.message = f"I/O failure at step {step} on {path}: {cause}"
        super().__init__(self.message)

    def __str__(self):
        return self.message


class LossIdentityError(DrmimError):
    """
    Raised by the trainer when the logged total does not equal cr - (rho * global + gamma * local) + idsim.
    """
    def __init__(self, record, error):
        self.record = record
        self.error = error
        self.message = f"Loss identity off by {error:.3e} at step {record.step}: {record.as_dict()}"
        super().__init__(self.message)

    def __str__(self):
        return self.message
