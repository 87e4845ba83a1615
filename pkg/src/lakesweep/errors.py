"""Exception hierarchy shared by every lakesweep module."""


class LakesweepError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(LakesweepError):
    """A caller broke a documented precondition (e.g. an illegal state transition)."""


class InvalidSpec(LakesweepError):
    """A sweep or experiment description is invalid.

    ``field`` names the offending parameter when known.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class InputError(LakesweepError):
    """Model or driver input could not be used (missing column, bad row...)."""


class ParseError(InputError):
    def __init__(self, message: str, filename: str | None = None):
        if filename:
            message = f"{filename}: {message}"
        super().__init__(message)
        self.filename = filename


class PackagingError(LakesweepError):
    """An archive could not be built or read."""


class PolicyError(LakesweepError):
    """An upload carried content the service refuses to accept (scripts, binaries)."""


class NotFound(LakesweepError):
    pass


class Conflict(LakesweepError):
    """The request is incompatible with the experiment's current state."""

    def __init__(self, message: str, state: str | None = None, fraction: float | None = None):
        super().__init__(message)
        self.state = state
        self.fraction = fraction


class TransportError(LakesweepError):
    """Network-level failure; callers may retry."""


class LinkDown(TransportError):
    pass


class ConnectivityError(TransportError):
    """Neither a direct path nor a relay is available between two peers."""


class RegistrationRejected(LakesweepError):
    """The rendezvous refused a join (for example a duplicate peer_id)."""


class SecurityError(LakesweepError):
    """Handshake authentication failed."""


class ClassificationUnavailable(TransportError):
    """No reflector answered, so the NAT type cannot be determined."""


class HarnessError(LakesweepError):
    pass
