"""Fixed cryptographic primitives used throughout the toolkit.

The toolkit pins one algorithm per role so that serialized artifacts need
no negotiation fields: SHA-256 for hashing, XChaCha20-Poly1305 for
authenticated encryption (256-bit key, 24-byte nonce, 16-byte tag) and
Ed25519 for server signatures (64 bytes).

XChaCha20-Poly1305 is composed from primitives here: HChaCha20 derives a
subkey from the key and the first 16 nonce bytes, then standard
ChaCha20-Poly1305 runs under that subkey with the remaining 8 nonce bytes.
The HChaCha20 permutation output is recovered from the ChaCha20 keystream
by subtracting the known initial state, since a keystream block is the
serialized sum of the final and initial states.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Final

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

KEY_LEN: Final = 32
NONCE_LEN: Final = 24
TAG_LEN: Final = 16
DIGEST_LEN: Final = 32
SIGNATURE_LEN: Final = 64

# "expand 32-byte k", the four constant words of the ChaCha state.
_SIGMA: Final = (0x61707865, 0x3320646E, 0x79622D32, 0x6B206574)

__all__ = [
    "KEY_LEN",
    "NONCE_LEN",
    "TAG_LEN",
    "DIGEST_LEN",
    "SIGNATURE_LEN",
    "InvalidTag",
    "XChaCha20Poly1305",
    "hash256",
    "generate_signing_key",
    "sign",
    "verify",
    "signing_key_bytes",
    "signing_key_from_bytes",
    "public_key_bytes",
    "public_key_from_bytes",
]


def hash256(*parts: bytes) -> bytes:
    """Return the toolkit hash (SHA-256) over the concatenated parts."""
    h = hashlib.sha256()
    for part in parts:
        h.update(part)
    return h.digest()


def _hchacha20(key: bytes, nonce16: bytes) -> bytes:
    """Derive a 32-byte subkey from ``key`` and a 16-byte nonce prefix."""
    if len(key) != KEY_LEN:
        raise ValueError(f"key must be {KEY_LEN} bytes, got {len(key)}")
    if len(nonce16) != 16:
        raise ValueError(f"HChaCha20 nonce must be 16 bytes, got {len(nonce16)}")
    # The library consumes a 16-byte "nonce" whose first word is the block
    # counter, which matches the HChaCha20 input layout exactly.
    encryptor = Cipher(algorithms.ChaCha20(key, nonce16), mode=None).encryptor()
    block = struct.unpack("<16I", encryptor.update(b"\x00" * 64))
    initial = (
        _SIGMA
        + struct.unpack("<8I", key)
        + struct.unpack("<4I", nonce16)
    )
    core = [(b - i) & 0xFFFFFFFF for b, i in zip(block, initial)]
    return struct.pack("<8I", *core[0:4], *core[12:16])


class XChaCha20Poly1305:
    """AEAD with a 24-byte nonce, mirroring the library AEAD interface.

    Args:
        key: 32-byte secret key.

    Raises:
        ValueError: if the key length is wrong.
    """

    def __init__(self, key: bytes) -> None:
        if len(key) != KEY_LEN:
            raise ValueError(f"key must be {KEY_LEN} bytes, got {len(key)}")
        self._key = key

    def _subcipher(self, nonce: bytes) -> tuple[ChaCha20Poly1305, bytes]:
        if len(nonce) != NONCE_LEN:
            raise ValueError(f"nonce must be {NONCE_LEN} bytes, got {len(nonce)}")
        subkey = _hchacha20(self._key, nonce[:16])
        # Remaining 8 nonce bytes ride in the low 96-bit nonce, zero-padded.
        return ChaCha20Poly1305(subkey), b"\x00" * 4 + nonce[16:]

    def encrypt(self, nonce: bytes, data: bytes, associated_data: bytes | None) -> bytes:
        """Seal ``data``; returns ciphertext with the 16-byte tag appended."""
        cipher, subnonce = self._subcipher(nonce)
        return cipher.encrypt(subnonce, data, associated_data)

    def decrypt(self, nonce: bytes, data: bytes, associated_data: bytes | None) -> bytes:
        """Open ``data`` (ciphertext plus tag).

        Raises:
            InvalidTag: wrong key, wrong nonce, or any bit of ciphertext,
                tag or associated data altered.
        """
        cipher, subnonce = self._subcipher(nonce)
        return cipher.decrypt(subnonce, data, associated_data)


def generate_signing_key() -> Ed25519PrivateKey:
    return Ed25519PrivateKey.generate()


def sign(key: Ed25519PrivateKey, message: bytes) -> bytes:
    """Sign ``message``; the signature is always 64 bytes."""
    return key.sign(message)


def verify(public_key: Ed25519PublicKey, signature: bytes, message: bytes) -> bool:
    """Return whether ``signature`` over ``message`` verifies."""
    if len(signature) != SIGNATURE_LEN:
        return False
    try:
        public_key.verify(signature, message)
    except InvalidSignature:
        return False
    return True


def signing_key_bytes(key: Ed25519PrivateKey) -> bytes:
    from cryptography.hazmat.primitives import serialization

    return key.private_bytes(
        serialization.Encoding.Raw,
        serialization.PrivateFormat.Raw,
        serialization.NoEncryption(),
    )


def signing_key_from_bytes(raw: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(raw)


def public_key_bytes(key: Ed25519PublicKey) -> bytes:
    from cryptography.hazmat.primitives import serialization

    return key.public_bytes(
        serialization.Encoding.Raw,
        serialization.PublicFormat.Raw,
    )


def public_key_from_bytes(raw: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(raw)
