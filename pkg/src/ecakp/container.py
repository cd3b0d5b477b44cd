"""Encrypted media container with gzip-compatible framing.

A protected file is a single gzip member whose DEFLATE payload has been
encrypted after compression. Standard gzip tools therefore recognize the
framing (magic, method, FEXTRA walk) but stop at the opaque payload, while
the toolkit recovers the plaintext only with the content key.

Byte layout of the canonical emission::

    offset  size  field
    0       1     0x1F            gzip magic, first byte
    1       1     0x8B            gzip magic, second byte
    2       1     0x08            compression method, DEFLATE
    3       1     0x04            FLG, only FEXTRA set
    4       4     0x00000000      MTIME, zeroed
    8       1     0x00            XFL
    9       1     0xFF            OS, "unknown"
    10      2     45              XLEN, little-endian
    12      2     'E' 'C'         protection subfield id
    14      2     41              subfield data length, little-endian
    16      1     0x01            container format version
    17      16    content id
    33      24    cipher nonce
    57      n     ciphertext      DEFLATE stream under XChaCha20-Poly1305
    57+n    16    auth tag
    73+n    4     CRC32           over the plaintext, little-endian
    77+n    4     ISIZE           plaintext length mod 2**32, little-endian

The exact header bytes (offsets 0..56) are the AEAD associated data, so
any header tamper that still parses fails authentication instead.
"""

from __future__ import annotations

import secrets
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Final

from .crypto import NONCE_LEN, TAG_LEN, InvalidTag, XChaCha20Poly1305, hash256
from .errors import (
    CorruptionError,
    FramingError,
    NotAContainerError,
    PackagingError,
    TamperedPayloadError,
    UnprotectedGzipError,
)

GZIP_MAGIC: Final = b"\x1f\x8b"
METHOD_DEFLATE: Final = 0x08
FLAG_FTEXT: Final = 0x01
FLAG_FHCRC: Final = 0x02
FLAG_FEXTRA: Final = 0x04
FLAG_FNAME: Final = 0x08
FLAG_FCOMMENT: Final = 0x10
SUBFIELD_ID: Final = b"EC"
CONTAINER_VERSION: Final = 1
CONTENT_ID_LEN: Final = 16
SUBFIELD_DATA_LEN: Final = 1 + CONTENT_ID_LEN + NONCE_LEN  # 41
HEADER_LEN: Final = 12 + 4 + SUBFIELD_DATA_LEN  # 57
TRAILER_LEN: Final = 8
CONTAINER_SUFFIX: Final = ".ecakp"

_SEED_LEN: Final = 32


@dataclass(frozen=True)
class ContentId:
    """16-byte identifier a producer assigns to one piece of content."""

    value: bytes

    def __post_init__(self) -> None:
        if len(self.value) != CONTENT_ID_LEN:
            raise ValueError(
                f"content id must be {CONTENT_ID_LEN} bytes, got {len(self.value)}"
            )

    @classmethod
    def generate(cls) -> "ContentId":
        return cls(secrets.token_bytes(CONTENT_ID_LEN))

    @classmethod
    def from_hex(cls, text: str) -> "ContentId":
        """Parse a 32-hex-digit id string.

        Raises:
            ValueError: the text is not exactly 16 bytes of hex.
        """
        return cls(bytes.fromhex(text.strip()))

    @property
    def hex(self) -> str:
        return self.value.hex()


@dataclass(frozen=True)
class PackagingSecret:
    """Producer-side seed from which per-content key material derives.

    The master key is a pure function of the seed and the content id, so
    the producer stores one secret per release and recomputes keys on
    demand. The payload nonce is likewise derived, making packing
    deterministic for a fixed (plaintext, id, secret) triple.
    """

    nonce_seed: bytes

    def __post_init__(self) -> None:
        if len(self.nonce_seed) != _SEED_LEN:
            raise ValueError(
                f"nonce seed must be {_SEED_LEN} bytes, got {len(self.nonce_seed)}"
            )

    @classmethod
    def generate(cls) -> "PackagingSecret":
        return cls(secrets.token_bytes(_SEED_LEN))

    def master_key(self, content_id: ContentId) -> bytes:
        """Content key: H(nonce_seed || content_id)."""
        return hash256(self.nonce_seed, content_id.value)

    def payload_nonce(self) -> bytes:
        return hash256(self.nonce_seed, b"nonce")[:NONCE_LEN]


@dataclass(frozen=True)
class ContainerHeader:
    content_id: ContentId
    cipher_nonce: bytes
    version: int = CONTAINER_VERSION
    # Exact bytes as emitted or read; authenticated as AEAD associated data.
    raw: bytes = field(default=b"", compare=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.cipher_nonce) != NONCE_LEN:
            raise ValueError(
                f"cipher nonce must be {NONCE_LEN} bytes, got {len(self.cipher_nonce)}"
            )

    def to_bytes(self) -> bytes:
        """Canonical 57-byte header emission."""
        subfield = struct.pack("<B", self.version) + self.content_id.value + self.cipher_nonce
        extra = SUBFIELD_ID + struct.pack("<H", len(subfield)) + subfield
        return (
            GZIP_MAGIC
            + struct.pack("<BB", METHOD_DEFLATE, FLAG_FEXTRA)
            + struct.pack("<IBB", 0, 0, 0xFF)
            + struct.pack("<H", len(extra))
            + extra
        )

    def authenticated_bytes(self) -> bytes:
        return self.raw if self.raw else self.to_bytes()


@dataclass(frozen=True)
class EncryptedContainer:
    header: ContainerHeader
    payload: bytes
    auth_tag: bytes
    crc32: int
    isize: int

    def __post_init__(self) -> None:
        if len(self.auth_tag) != TAG_LEN:
            raise ValueError(f"auth tag must be {TAG_LEN} bytes, got {len(self.auth_tag)}")

    @property
    def content_id(self) -> ContentId:
        return self.header.content_id

    def to_bytes(self) -> bytes:
        return (
            self.header.authenticated_bytes()
            + self.payload
            + self.auth_tag
            + struct.pack("<II", self.crc32, self.isize)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncryptedContainer":
        header, offset = _parse_header(data)
        body = data[offset:]
        if len(body) < TAG_LEN + TRAILER_LEN:
            raise FramingError("container body truncated")
        crc32, isize = struct.unpack("<II", body[-TRAILER_LEN:])
        return cls(
            header=header,
            payload=body[: -TAG_LEN - TRAILER_LEN],
            auth_tag=body[-TAG_LEN - TRAILER_LEN : -TRAILER_LEN],
            crc32=crc32,
            isize=isize,
        )


class _Cursor:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FramingError(f"truncated header: {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def skip_zstring(self, what: str) -> None:
        end = self.data.find(b"\x00", self.pos)
        if end < 0:
            raise FramingError(f"truncated header: {what}")
        self.pos = end + 1


def _parse_header(data: bytes) -> tuple[ContainerHeader, int]:
    cur = _Cursor(data)
    if cur.take(2, "magic") != GZIP_MAGIC:
        raise NotAContainerError("not an ECAKP container")
    method, flags = struct.unpack("<BB", cur.take(2, "method/flags"))
    if method != METHOD_DEFLATE:
        raise FramingError(f"unsupported compression method {method:#x}")
    if flags & 0xE0:
        raise FramingError("reserved header flag bits set")
    cur.take(6, "mtime/xfl/os")

    subfield: bytes | None = None
    if flags & FLAG_FEXTRA:
        (xlen,) = struct.unpack("<H", cur.take(2, "extra length"))
        extra = cur.take(xlen, "extra field")
        subfield = _find_subfield(extra)

    # Walk the optional trailing fields so plain gzip streams classify
    # cleanly instead of tripping over name or checksum bytes.
    if flags & FLAG_FNAME:
        cur.skip_zstring("file name")
    if flags & FLAG_FCOMMENT:
        cur.skip_zstring("comment")
    if flags & FLAG_FHCRC:
        cur.take(2, "header crc")

    if subfield is None:
        raise UnprotectedGzipError("unprotected gzip stream")
    version = subfield[0]
    if version != CONTAINER_VERSION:
        raise FramingError(f"unsupported container version {version}")
    header = ContainerHeader(
        content_id=ContentId(subfield[1 : 1 + CONTENT_ID_LEN]),
        cipher_nonce=subfield[1 + CONTENT_ID_LEN :],
        version=version,
        raw=data[: cur.pos],
    )
    return header, cur.pos


def _find_subfield(extra: bytes) -> bytes | None:
    """Scan a FEXTRA block for the protection subfield."""
    found: bytes | None = None
    pos = 0
    while pos < len(extra):
        if pos + 4 > len(extra):
            raise FramingError("truncated extra subfield header")
        sub_id = extra[pos : pos + 2]
        (sub_len,) = struct.unpack("<H", extra[pos + 2 : pos + 4])
        pos += 4
        if pos + sub_len > len(extra):
            raise FramingError("truncated extra subfield data")
        data = extra[pos : pos + sub_len]
        pos += sub_len
        if sub_id == SUBFIELD_ID:
            if found is not None:
                raise FramingError("duplicate protection subfield")
            if sub_len != SUBFIELD_DATA_LEN:
                raise FramingError(
                    f"protection subfield must be {SUBFIELD_DATA_LEN} bytes, got {sub_len}"
                )
            found = data
    return found


def parse_header(data: bytes) -> ContainerHeader:
    """Parse and validate the container header without touching the payload.

    Args:
        data: at least the full header span of a container.

    Returns:
        The parsed header; its ``raw`` field holds the exact bytes read.

    Raises:
        NotAContainerError: the gzip magic is absent.
        UnprotectedGzipError: valid gzip framing with no protection subfield.
        FramingError: truncated or structurally invalid header.
    """
    header, _ = _parse_header(data)
    return header


def pack(
    plaintext: bytes | BinaryIO,
    content_id: ContentId,
    secret: PackagingSecret,
) -> EncryptedContainer:
    """Compress, encrypt and frame ``plaintext`` as a protected container.

    Deterministic: the same (plaintext, content id, secret) triple always
    yields byte-identical output.

    Raises:
        PackagingError: the input stream could not be read.
    """
    if not isinstance(plaintext, (bytes, bytearray, memoryview)):
        try:
            plaintext = plaintext.read()
        except OSError as exc:
            raise PackagingError(f"cannot read input stream: {exc}") from exc
    plaintext = bytes(plaintext)

    # Raw DEFLATE stream: the gzip framing supplies its own header/trailer.
    deflater = zlib.compressobj(wbits=-zlib.MAX_WBITS)
    compressed = deflater.compress(plaintext) + deflater.flush()

    nonce = secret.payload_nonce()
    header = ContainerHeader(content_id=content_id, cipher_nonce=nonce)
    header = ContainerHeader(content_id=content_id, cipher_nonce=nonce, raw=header.to_bytes())
    sealed = XChaCha20Poly1305(secret.master_key(content_id)).encrypt(
        nonce, compressed, header.raw
    )
    return EncryptedContainer(
        header=header,
        payload=sealed[:-TAG_LEN],
        auth_tag=sealed[-TAG_LEN:],
        crc32=zlib.crc32(plaintext),
        isize=len(plaintext) % 2**32,
    )


def unpack(container: EncryptedContainer, content_key: bytes) -> bytes:
    """Authenticate, decrypt and decompress a container back to plaintext.

    Raises:
        TamperedPayloadError: authentication failed; deliberately does not
            distinguish a wrong key from a tampered payload.
        CorruptionError: authenticated payload fails to inflate, or the
            plaintext disagrees with the CRC32/ISIZE trailer.
    """
    aead = XChaCha20Poly1305(content_key)
    try:
        compressed = aead.decrypt(
            container.header.cipher_nonce,
            container.payload + container.auth_tag,
            container.header.authenticated_bytes(),
        )
    except InvalidTag:
        raise TamperedPayloadError("wrong key or tampered payload") from None

    try:
        inflater = zlib.decompressobj(wbits=-zlib.MAX_WBITS)
        plaintext = inflater.decompress(compressed) + inflater.flush()
        if inflater.unconsumed_tail or not inflater.eof:
            raise CorruptionError("compressed payload ends prematurely")
    except zlib.error as exc:
        raise CorruptionError(f"compressed payload does not inflate: {exc}") from exc

    if zlib.crc32(plaintext) != container.crc32:
        raise CorruptionError("plaintext CRC32 mismatch")
    if len(plaintext) % 2**32 != container.isize:
        raise CorruptionError("plaintext length mismatch")
    return plaintext


def write_container(container: EncryptedContainer, path: str | Path) -> None:
    Path(path).write_bytes(container.to_bytes())


def read_container(path: str | Path) -> EncryptedContainer:
    """Load a container file.

    Raises the same classification errors as :func:`parse_header`, plus
    framing errors for truncated bodies.
    """
    return EncryptedContainer.from_bytes(Path(path).read_bytes())
