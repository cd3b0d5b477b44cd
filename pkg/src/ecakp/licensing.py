"""License files: issuance, signature checks and node-locked key unwrap.

A license binds one content id to one machine fingerprint. The content
key never appears in clear: it is AEAD-wrapped under a key derived from
the fingerprint digest, so only a machine that still matches the stored
identity (within the drift tolerance) can recover it. The server signs
the canonical serialization; clients refuse unsigned or altered files.

Binary layout, all integers little-endian, signature appended last::

    magic 'ECLF' | version u8 | content_id 16 | fingerprint_digest 32
    | attr_count u16 | (name_len u16, name, digest 32)*
    | wrap_nonce 24 | wrapped_len u16 | wrapped_key | issued_at u64
    | signature 64
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Final

from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .container import ContentId
from .crypto import (
    DIGEST_LEN,
    KEY_LEN,
    NONCE_LEN,
    SIGNATURE_LEN,
    TAG_LEN,
    InvalidTag,
    XChaCha20Poly1305,
    hash256,
    sign,
    verify,
)
from .errors import CorruptionError, LicenseParseError, WrongMachineError
from .identity import DEFAULT_TOLERANCE, AttributeSet, MachineFingerprint, matches

LICENSE_MAGIC: Final = b"ECLF"
LICENSE_VERSION: Final = 1
WRAPPED_KEY_LEN: Final = KEY_LEN + TAG_LEN  # 48
LICENSE_SUFFIX: Final = ".eclic"

_WRAP_CONTEXT: Final = b"wrap"


@dataclass(frozen=True)
class LicenseFile:
    content_id: ContentId
    fingerprint_digest: bytes
    attribute_digests: tuple[tuple[str, bytes], ...]
    wrapped_key: bytes
    wrap_nonce: bytes
    issued_at: int
    server_signature: bytes

    def __post_init__(self) -> None:
        if len(self.fingerprint_digest) != DIGEST_LEN:
            raise ValueError("fingerprint digest must be 32 bytes")
        if len(self.wrapped_key) != WRAPPED_KEY_LEN:
            raise ValueError(f"wrapped key must be {WRAPPED_KEY_LEN} bytes")
        if len(self.wrap_nonce) != NONCE_LEN:
            raise ValueError(f"wrap nonce must be {NONCE_LEN} bytes")
        if len(self.server_signature) != SIGNATURE_LEN:
            raise ValueError(f"signature must be {SIGNATURE_LEN} bytes")
        if self.issued_at < 0:
            raise ValueError("issued_at must be non-negative")

    def stored_fingerprint(self) -> MachineFingerprint:
        return MachineFingerprint(
            digest=self.fingerprint_digest,
            attribute_digests=self.attribute_digests,
        )

    def signed_payload(self) -> bytes:
        """Canonical serialization covered by the server signature."""
        out = bytearray()
        out += LICENSE_MAGIC
        out += struct.pack("<B", LICENSE_VERSION)
        out += self.content_id.value
        out += self.fingerprint_digest
        out += struct.pack("<H", len(self.attribute_digests))
        for name, digest in self.attribute_digests:
            encoded = name.encode("utf-8")
            out += struct.pack("<H", len(encoded))
            out += encoded
            out += digest
        out += self.wrap_nonce
        out += struct.pack("<H", len(self.wrapped_key))
        out += self.wrapped_key
        out += struct.pack("<Q", self.issued_at)
        return bytes(out)

    def to_bytes(self) -> bytes:
        return self.signed_payload() + self.server_signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "LicenseFile":
        """Strictly decode a license file.

        Raises:
            LicenseParseError: any structural defect, including trailing
                garbage or digests of the wrong length.
        """
        reader = _Reader(data)
        try:
            if reader.take(4) != LICENSE_MAGIC:
                raise LicenseParseError("not a license file")
            (version,) = struct.unpack("<B", reader.take(1))
            if version != LICENSE_VERSION:
                raise LicenseParseError(f"unsupported license version {version}")
            content_id = ContentId(reader.take(16))
            fingerprint_digest = reader.take(DIGEST_LEN)
            (attr_count,) = struct.unpack("<H", reader.take(2))
            attribute_digests = []
            for _ in range(attr_count):
                (name_len,) = struct.unpack("<H", reader.take(2))
                name = reader.take(name_len).decode("utf-8")
                attribute_digests.append((name, reader.take(DIGEST_LEN)))
            wrap_nonce = reader.take(NONCE_LEN)
            (wrapped_len,) = struct.unpack("<H", reader.take(2))
            if wrapped_len != WRAPPED_KEY_LEN:
                raise LicenseParseError("wrapped key has unexpected length")
            wrapped_key = reader.take(wrapped_len)
            (issued_at,) = struct.unpack("<Q", reader.take(8))
            signature = reader.take(SIGNATURE_LEN)
        except (_Truncated, UnicodeDecodeError, ValueError) as exc:
            raise LicenseParseError(f"malformed license file: {exc}") from exc
        if reader.remaining():
            raise LicenseParseError("trailing bytes after license file")
        return cls(
            content_id=content_id,
            fingerprint_digest=fingerprint_digest,
            attribute_digests=tuple(attribute_digests),
            wrapped_key=wrapped_key,
            wrap_nonce=wrap_nonce,
            issued_at=issued_at,
            server_signature=signature,
        )


class _Truncated(Exception):
    pass


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise _Truncated(f"needed {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def remaining(self) -> int:
        return len(self.data) - self.pos


def _wrap_key_for(fingerprint_digest: bytes) -> bytes:
    return hash256(fingerprint_digest, _WRAP_CONTEXT)


def issue_license(
    content_id: ContentId,
    machine: MachineFingerprint,
    master_key: bytes,
    signing_key: Ed25519PrivateKey,
    issued_at: int | None = None,
) -> LicenseFile:
    """Wrap the content key for ``machine`` and sign the result.

    The wrap key derives from the stored fingerprint digest, which is what
    lets a drifted machine that still matches unwrap later: the client
    recomputes the wrap key from the digest in the license, not from its
    current attributes.
    """
    if len(master_key) != KEY_LEN:
        raise ValueError(f"master key must be {KEY_LEN} bytes")
    wrap_nonce = os.urandom(NONCE_LEN)
    wrapped = XChaCha20Poly1305(_wrap_key_for(machine.digest)).encrypt(
        wrap_nonce, master_key, content_id.value
    )
    unsigned = LicenseFile(
        content_id=content_id,
        fingerprint_digest=machine.digest,
        attribute_digests=machine.attribute_digests,
        wrapped_key=wrapped,
        wrap_nonce=wrap_nonce,
        issued_at=int(time.time()) if issued_at is None else issued_at,
        server_signature=b"\x00" * SIGNATURE_LEN,
    )
    signature = sign(signing_key, unsigned.signed_payload())
    return LicenseFile(
        content_id=unsigned.content_id,
        fingerprint_digest=unsigned.fingerprint_digest,
        attribute_digests=unsigned.attribute_digests,
        wrapped_key=unsigned.wrapped_key,
        wrap_nonce=unsigned.wrap_nonce,
        issued_at=unsigned.issued_at,
        server_signature=signature,
    )


def verify_license(license_file: LicenseFile, server_public_key: Ed25519PublicKey) -> bool:
    """Check the server signature over the canonical serialization."""
    return verify(
        server_public_key, license_file.server_signature, license_file.signed_payload()
    )


def unwrap_content_key(
    license_file: LicenseFile,
    current: AttributeSet,
    tolerance: int = DEFAULT_TOLERANCE,
) -> bytes:
    """Recover the content key on a machine matching the stored identity.

    Raises:
        WrongMachineError: the current attributes drift beyond tolerance;
            raised before any decryption is attempted.
        CorruptionError: the wrapped key fails authentication.
    """
    if not matches(license_file.stored_fingerprint(), current, tolerance):
        raise WrongMachineError("license is not valid for this machine")
    try:
        return XChaCha20Poly1305(_wrap_key_for(license_file.fingerprint_digest)).decrypt(
            license_file.wrap_nonce,
            license_file.wrapped_key,
            license_file.content_id.value,
        )
    except InvalidTag:
        raise CorruptionError("license key material failed authentication") from None


def config_home(override: str | Path | None = None) -> Path:
    """Client state directory: override, $ECAKP_HOME, or ~/.config/ecakp."""
    if override is not None:
        return Path(override)
    env = os.environ.get("ECAKP_HOME")
    if env:
        return Path(env)
    return Path.home() / ".config" / "ecakp"


def default_license_path(content_id: ContentId, home: str | Path | None = None) -> Path:
    return config_home(home) / "licenses" / f"{content_id.hex}{LICENSE_SUFFIX}"


def save_license(license_file: LicenseFile, path: str | Path) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(license_file.to_bytes())
    os.replace(tmp, path)


def load_license(path: str | Path) -> LicenseFile:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LicenseParseError(f"cannot read license file: {exc}") from exc
    return LicenseFile.from_bytes(data)
