"""Exception types shared across the package."""


class XmodalError(Exception):
    """Base class for all errors raised by this package."""


class ArgumentError(XmodalError):
    """A caller-supplied argument violates an operation's preconditions."""


class DatasetError(XmodalError):
    """A dataset is structurally unusable for the requested operation."""


class LookupFailure(XmodalError):
    """A centroid or table entry that the contract requires is missing."""


class SelectionError(XmodalError):
    """No eligible candidate exists for a selection (e.g. negative centroid)."""


class AttackError(XmodalError):
    """The attack loop hit an unrecoverable inconsistency."""


class EvaluationError(XmodalError):
    """Evaluation inputs violate the metric contract (e.g. identity missing)."""


class NumericalError(XmodalError):
    """An optimizer diverged or produced non-finite values."""


class StorageError(XmodalError):
    """A file is missing, truncated, or fails its integrity checks."""


class FingerprintMismatch(StorageError):
    """Two artifacts that must belong together carry different fingerprints."""

    def __init__(self, kind: str, expected: str, actual: str):
        self.kind = kind
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{kind} fingerprint mismatch: expected {expected}, got {actual}"
        )
