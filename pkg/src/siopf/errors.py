"""Exception hierarchy shared by all modules."""


class SiopfError(Exception):
    """Base class for every error raised by the package."""


class DimensionMismatch(SiopfError, ValueError):
    pass


class FeederError(SiopfError, ValueError):
    """Invalid feeder description (schema or electrical data)."""


class NotATree(FeederError):
    pass


class NonPositiveImpedance(FeederError):
    pass


class NotPositiveDefinite(FeederError):
    pass


class InfeasibleOpf(SiopfError):
    def __init__(self, message: str, minute: int | None = None):
        super().__init__(message)
        self.minute = minute


class IterationLimit(SiopfError):
    pass


class AmbiguousActivity(SiopfError):
    pass


class DegenerateDuals(SiopfError):
    pass


class BadDimensions(SiopfError, ValueError):
    pass


class EmptyBatch(SiopfError, ValueError):
    pass


class NonFiniteLoss(SiopfError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class BadConfig(SiopfError, ValueError):
    pass


class DegenerateProfile(SiopfError, ValueError):
    pass
