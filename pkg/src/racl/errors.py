"""Exception hierarchy shared by the pipeline modules."""


class RaclError(Exception):
    """Base class for all errors raised by this package."""


class AudioError(RaclError):
    pass


class WavNotFoundError(AudioError):
    pass


class MalformedHeaderError(AudioError):
    pass


class UnsupportedEncodingError(AudioError):
    pass


class EmptyInputError(AudioError):
    pass


class DegeneratePowerError(RaclError):
    """Signal or interferer has zero mean-square power, so no SNR gain exists."""


class ConfigError(RaclError):
    pass


class ShapeError(RaclError):
    pass


class NumericError(RaclError):
    pass


class UndefinedEERError(RaclError):
    pass


class ManifestError(RaclError):
    pass


class CheckpointError(RaclError):
    pass
