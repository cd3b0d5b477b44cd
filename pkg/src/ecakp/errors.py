"""Exception hierarchy shared across the toolkit.

Every error raised by the public API derives from :class:`EcakpError` so
callers can catch toolkit failures with a single handler while still
distinguishing the classes that map to distinct exit codes.
"""

from __future__ import annotations


class EcakpError(Exception):
    """Base class for all toolkit errors."""


class PackagingError(EcakpError):
    """Input could not be read or compressed during packing."""


class NotAContainerError(EcakpError):
    """The stream does not start with the gzip magic bytes."""


class UnprotectedGzipError(EcakpError):
    """A valid gzip stream that carries no protection subfield."""


class FramingError(EcakpError):
    """Truncated or structurally mangled container framing."""


class TamperedPayloadError(EcakpError):
    """Payload authentication failed: wrong key or tampered payload."""


class CorruptionError(EcakpError):
    """Post-decryption integrity failure (inflate, CRC or size)."""


class IdentityError(EcakpError):
    """Machine attributes could not be collected or canonicalized."""


class LicenseParseError(EcakpError):
    """License file bytes do not decode to a well-formed license."""


class LicenseVerificationError(EcakpError):
    """License signature does not verify under the server key."""


class WrongMachineError(EcakpError):
    """License is bound to a different machine fingerprint."""


class InputError(EcakpError):
    """User-supplied value is malformed (id, email, paths)."""


class ProtocolError(EcakpError):
    """Malformed request or response on the activation wire."""


class RegistrationConflictError(EcakpError):
    """Content id is already registered with the server."""


class UnknownContentError(EcakpError):
    """Content id is not registered with the server."""


class TransportError(EcakpError):
    """Network-level failure reaching the activation server; retryable."""


class ResponseVerificationError(EcakpError):
    """Server response failed verification and was not persisted."""


class NetworkBlockedError(EcakpError):
    """Network use attempted in a phase where the gate blocks it."""


class GuardRefusalError(EcakpError):
    """Live guard enforcement failed, so playback is refused."""


class LedgerError(EcakpError):
    """Activation ledger could not be read or written."""
