"""Exception types shared across the package."""


class EnvIdError(Exception):
    """Base class for all package-specific errors."""


# ---- geometry / room simulation ----

class InvalidRoomSpec(EnvIdError):
    pass


class RoomTooSmall(EnvIdError):
    pass


class InvalidGeometry(EnvIdError):
    pass


class DecayTooShort(EnvIdError):
    pass


# ---- degradation chain ----

class SampleRateMismatch(EnvIdError):
    pass


class SilentNoiseSource(EnvIdError):
    pass


class CodecUnavailable(EnvIdError):
    pass


class CodecFailure(EnvIdError):
    pass


class EmptyProfile(EnvIdError):
    pass


# ---- model / autodiff ----

class ShapeMismatch(EnvIdError):
    pass


class GraphNotRecorded(EnvIdError):
    pass


# ---- few-shot machinery ----

class InsufficientClasses(EnvIdError):
    pass


class InsufficientSamples(EnvIdError):
    pass


class EmptySupport(EnvIdError):
    pass


class DimensionMismatch(EnvIdError):
    pass


# ---- evaluation ----

class EmptyPool(EnvIdError):
    pass


class SingleClassScores(EnvIdError):
    pass


class LengthMismatch(EnvIdError):
    pass


class ProtocolMismatch(EnvIdError):
    pass


# ---- pipeline / IO ----

class ConfigError(EnvIdError):
    pass


class MissingPool(EnvIdError):
    pass


class UnreadableFile(EnvIdError):
    pass


class EmptyDirectory(EnvIdError):
    pass
