"""Exception taxonomy shared across the package."""


class BandnetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(BandnetError):
    """Invalid or inconsistent configuration (bad rates, dims, scenario names)."""


class AudioFormatError(BandnetError):
    """Malformed or unparseable audio container."""


class UnsupportedChannelError(AudioFormatError):
    """Audio file is not mono."""


class UnsupportedCodecError(AudioFormatError):
    """Audio codec other than PCM16 / IEEE float32."""


class ShapeError(BandnetError):
    """Tensor shapes do not satisfy an operation's contract."""


class DataError(BandnetError):
    """Corpus/feature data violates an invariant (label misalignment, empty input)."""


class VariantError(BandnetError):
    """Operation not defined for this model variant, or checkpoint variant mismatch."""


class CheckpointError(BandnetError):
    """Checkpoint file is corrupt, truncated, or has the wrong magic/version."""


class NumericError(BandnetError):
    """Non-finite loss or other numeric breakdown during training."""
