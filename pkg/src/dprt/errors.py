"""Exception taxonomy shared across the package."""


class DprtError(Exception):
    """Base class for all errors raised by this package."""


class SceneFormatError(DprtError):
    """Scene document failed to parse or validate; message names the field."""


class UsageError(DprtError):
    """API misuse: dead handles, unknown parameters, out-of-order calls."""


class TransportError(DprtError):
    """Communication failure: connect/accept/send/receive error or timeout."""


class ProtocolError(TransportError):
    """Wire-level contract violation: bad sequence, mismatched collective."""


class DecodeError(DprtError):
    """Byte stream does not decode to a valid message."""


class ContractError(DprtError):
    """Collective call invoked with divergent parameters across ranks."""
