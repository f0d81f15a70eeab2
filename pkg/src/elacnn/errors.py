"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class ElaCnnError(Exception):
    """Base class for every error raised on purpose by this package."""


class ContractError(ElaCnnError, ValueError):
    """An argument violated a documented precondition (shape, range, ...)."""


class StateError(ElaCnnError, RuntimeError):
    """An operation was called out of order, e.g. backward before forward."""


class CodecError(ElaCnnError):
    """Image decoding or JPEG round-tripping failed."""


class IngestionError(ElaCnnError):
    """A dataset tree could not be scanned into a usable manifest."""


class SplitError(ElaCnnError):
    """A train/validation split could not be formed."""


class DataItemError(ElaCnnError):
    """A single dataset item failed to load; ``path`` names the file."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path


class TrainingError(ElaCnnError):
    pass


class TrainingInterrupted(TrainingError):
    """Raised when a run stops early; carries the epochs completed so far."""

    def __init__(self, history):
        super().__init__(f"training interrupted after {len(history)} epoch(s)")
        self.history = history


class ArchiveError(ElaCnnError):
    pass


class BadMagicError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


class ArchitectureMismatchError(ArchiveError):
    pass
