"""Exception types raised across the package."""


class GatedFormerError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(GatedFormerError, ValueError):
    pass


class PrecisionMismatch(GatedFormerError, TypeError):
    pass


class AllMasked(GatedFormerError, ValueError):
    pass


class NotScalar(GatedFormerError, ValueError):
    pass


class NondeterministicFunction(GatedFormerError, RuntimeError):
    pass


class NonFiniteValue(GatedFormerError, FloatingPointError):
    pass


class OddDimension(GatedFormerError, ValueError):
    pass


class IndivisibleHeads(GatedFormerError, ValueError):
    pass


class InvalidPlacement(GatedFormerError, ValueError):
    pass


class ConfigError(GatedFormerError, ValueError):
    """Raised for invalid model/run configuration.

    ``problems`` lists every violated invariant, not just the first one.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class OutOfVocab(GatedFormerError, ValueError):
    pass


class EmptyTensor(GatedFormerError, ValueError):
    pass


class EmptyCorpus(GatedFormerError, ValueError):
    pass


class CorpusTooSmall(GatedFormerError, ValueError):
    pass


class DivergedLoss(GatedFormerError, FloatingPointError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged: non-finite loss {loss!r} at step {step}")


class CheckpointError(GatedFormerError, IOError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class NoGates(GatedFormerError, ValueError):
    pass
