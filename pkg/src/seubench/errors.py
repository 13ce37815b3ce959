"""Exception hierarchy shared by all modules."""


class SeuBenchError(Exception):
    """Base class for every error raised by this package."""


class ContractError(SeuBenchError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class BuildError(SeuBenchError, ValueError):
    """A model graph could not be built or failed structural validation."""


class ModelFormatError(SeuBenchError):
    """Base class for on-disk container problems."""


class ManifestError(ModelFormatError):
    """The manifest is missing, not valid JSON, or lacks required keys."""


class ExtentMismatchError(ModelFormatError):
    """A declared shape disagrees with the declared byte length."""


class TruncatedBlobError(ModelFormatError):
    """A blob file is shorter or longer than the manifest says."""


class PlanMismatchError(SeuBenchError):
    """A fault plan was generated for a different model."""


class UnreachableTargetError(SeuBenchError, ValueError):
    """A pruning FLOPs target exceeds what the allocator can remove."""

    def __init__(self, target, maximum):
        super().__init__(
            f"FLOPs reduction target {target:.3f} unreachable; maximum achievable is {maximum:.3f}"
        )
        self.target = target
        self.maximum = maximum
