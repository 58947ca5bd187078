"""Exception hierarchy shared by all subpackages."""


class SegChangeError(Exception):
    pass


class LoadError(SegChangeError):
    """A file or directory could not be read, or a checkpoint does not fit the model."""


class ValidationError(SegChangeError):
    """Input data violates a sample or mask invariant."""


class GenerationError(SegChangeError):
    pass


class ShapeError(SegChangeError, ValueError):
    pass


class RegistryError(SegChangeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConfigError(SegChangeError, ValueError):
    pass


class ContractError(SegChangeError, ValueError):
    """A runtime contract (e.g. a row-stochastic attention matrix) was violated."""


class EmptyEvaluationError(SegChangeError):
    pass


class ProviderError(SegChangeError):
    def __init__(self, message, retriable=False):
        super().__init__(message)
        self.retriable = retriable


class NonFiniteLossError(SegChangeError, FloatingPointError):
    def __init__(self, epoch, step, loss, grad_norm):
        super().__init__(
            f"non-finite loss at epoch {epoch}, step {step}: "
            f"loss={loss!r}, grad_norm={grad_norm!r}"
        )
        self.epoch = epoch
        self.step = step
        self.loss = loss
        self.grad_norm = grad_norm
