"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: DataError -> 2, NumericsError -> 3.
"""


class StemRefineError(Exception):
    """Base class for all toolkit errors."""


class DataError(StemRefineError):
    """Bad input data: malformed files, inconsistent manifests, empty pools."""


class AudioFormatError(DataError):
    """Unreadable or unsupported WAV file."""


class SilentAudioError(DataError):
    """An operation that requires signal content received digital silence."""


class NumericsError(StemRefineError):
    """Numerical failure: NaN/Inf activations, diverging training runs."""
