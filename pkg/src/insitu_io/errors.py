"""Exception hierarchy shared by every subsystem."""


class InsituError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(InsituError):
    """Invalid, malformed or unresolvable XML configuration."""


class ExpressionError(ConfigError):
    """Arithmetic expression could not be parsed or evaluated."""


class ActiveMessagingError(InsituError):
    """Misuse of the active messaging layer (duplicate uid, count mismatch...)."""


class ProtocolError(InsituError):
    """A transport message could not be decoded."""


class PipelineError(InsituError):
    """Bad data event or an operator failure in the diagnostics federator."""


class WriterError(InsituError):
    """Ordering, time manipulation or collective file failure."""


class LayoutError(InsituError):
    """Overlapping chunks, shape mismatch or a bad region write."""


class SdcFormatError(InsituError):
    """Corrupt or inconsistent SDC container."""


class CheckpointError(InsituError):
    """Checkpoint capture, write or restore failure."""


class QuiesceTimeout(CheckpointError):
    """The diagnostics federator did not drain before the deadline."""

    def __init__(self, message, stuck=()):
        super().__init__(message)
        self.stuck = list(stuck)


class HandshakeError(InsituError):
    """A producer's registration is incompatible with the configuration."""


class DeadlockError(InsituError):
    """The simulation went quiet without satisfying the termination criteria."""

    def __init__(self, message, outstanding=()):
        super().__init__(message)
        self.outstanding = list(outstanding)
