class DhnswError(Exception):
    """Base class for every error raised by the search engine."""


class ContractViolationError(DhnswError, ValueError):
    """A caller broke an operation's precondition (dimensions, k, capacities)."""


class ParseError(DhnswError, ValueError):
    """A binary artifact (xvecs file, sub-index image, metadata block, wire message) is malformed."""


class FabricError(DhnswError):
    """A remote-memory operation failed; nothing of the failing batch was applied."""


class OutOfBoundsError(FabricError, ContractViolationError):
    """A read or write descriptor falls outside its registered region."""


class LayoutError(DhnswError):
    """The remote layout cannot be built or is inconsistent."""

    def __init__(self, message: str, required_size: int | None = None) -> None:
        super().__init__(message)
        self.required_size = required_size


class EpochPhaseError(DhnswError):
    """An epoch operation was called in a phase that does not allow it."""


class UnknownWorkerError(DhnswError):
    """A worker id that never registered with the epoch manager."""
