"""Exception hierarchy shared across the pipeline.

Three families matter operationally: usage errors (bad flags/config, CLI exit
code 1), data errors (unreadable or inconsistent inputs, exit code 2), and
numerical failures (diverged training, exit code 3).
"""


class HsegError(Exception):
    """Base class for all package-specific errors."""


class UsageError(HsegError):
    """Invalid flags, config keys, or argument combinations."""


class DataError(HsegError):
    """Unreadable, malformed, or mutually inconsistent input data."""


class BadMagicError(DataError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(DataError):
    """File ends before the payload announced by its header."""


class HeaderMismatchError(DataError):
    """Header fields are inconsistent (dims/length/dtype mismatch)."""


class GeometryError(DataError):
    """Two grids that must share geometry (dims + spacing) do not."""


class EmptyLiverSliceError(DataError):
    """A slice scheduled for patch sampling has no liver pixels.

    Callers treat this as a skip signal, not a fatal condition.
    """


class NumericalError(HsegError):
    """Non-finite values where finite ones are required."""


class TrainingDivergedError(NumericalError):
    """Loss became NaN/Inf during training; carries a diagnostic string."""

    def __init__(self, iteration: int, diagnostic: str):
        super().__init__(f"non-finite loss at iteration {iteration}: {diagnostic}")
        self.iteration = iteration
        self.diagnostic = diagnostic
