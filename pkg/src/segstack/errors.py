"""Exception hierarchy shared across the library.

The CLI maps these onto exit codes: usage problems exit 1, data/shape
problems exit 2, numeric divergence exits 3.
"""


class SegstackError(Exception):
    """Base class for all library errors."""


class ShapeError(SegstackError, ValueError):
    """A tensor/raster dimension does not match the operation's contract."""


class SpecError(SegstackError, ValueError):
    """A network or head specification is internally inconsistent."""


class ConfigError(SegstackError, ValueError):
    """A configuration value is out of range or unparsable."""


class FormatError(SegstackError, ValueError):
    """A serialized file (.ten, checkpoint bundle, PPM/PGM) is malformed."""


class CheckpointError(SegstackError, ValueError):
    """A checkpoint bundle cannot be applied to the target network."""


class TilingError(SegstackError, ValueError):
    """A raster cannot be covered by the requested tile geometry."""


class DataError(SegstackError, ValueError):
    """Raster contents violate a data contract (e.g. nothing to normalize)."""


class StaleTapeError(SegstackError, RuntimeError):
    """backward() was called again on an already-consumed graph."""


class TrainingError(SegstackError, RuntimeError):
    """The training loop hit an unrecoverable state (e.g. missing grads)."""


class DivergenceError(SegstackError, RuntimeError):
    """Training produced a non-finite loss; last good checkpoint was saved."""
