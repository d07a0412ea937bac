"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its preconditions."""


class SupportCapExceeded(ContractViolation):
    """The response support is too large for exact enumeration."""


class EngineAbort(RuntimeError):
    """A training run hit a non-finite loss, gradient, or parameter.

    Carries enough context to locate the failing step, plus the partial
    run manifest so callers can persist what completed before the abort.
    """

    def __init__(self, message, iteration=None, epoch=None, batch_index=None,
                 manifest=None):
        super().__init__(message)
        self.iteration = iteration
        self.epoch = epoch
        self.batch_index = batch_index
        self.manifest = manifest
