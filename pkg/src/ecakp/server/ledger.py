"""Persistent activation ledger: append-only event log plus product table.

Two files live in the ledger directory:

* ``events.bin`` is the append-only record of every activation decision,
  framed as ``u32 length || payload`` and fsynced per append. It is the
  source of truth for grant history and stolen status.
* ``products.json`` is a small snapshot of registrations (master key and
  policy per content id), rewritten atomically on admin changes.

Reload replays the event log to rebuild per-copy state. A truncated
trailing record, the footprint of a crash mid-append, is dropped and the
file is trimmed back to the last complete frame; corruption anywhere
else fails loudly.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Final, Iterator

from ..container import ContentId
from ..crypto import DIGEST_LEN, KEY_LEN
from ..errors import LedgerError, RegistrationConflictError, UnknownContentError
from .policy import LedgerView, Outcome, PolicyMode, ProductStatus, Reason

_log = logging.getLogger(__name__)

EVENTS_FILE: Final = "events.bin"
PRODUCTS_FILE: Final = "products.json"
_RECORD_VERSION: Final = 1

_OUTCOME_CODES: Final = {
    Outcome.GRANTED: 1,
    Outcome.DENIED: 2,
    Outcome.DENIED_STOLEN: 3,
}
_OUTCOME_BY_CODE: Final = {code: outcome for outcome, code in _OUTCOME_CODES.items()}
_REASON_CODES: Final = {
    None: 0,
    Reason.LIMIT_REACHED: 1,
    Reason.STOLEN: 2,
    Reason.UNKNOWN_CONTENT: 3,
    Reason.WRONG_MACHINE: 4,
}
_REASON_BY_CODE: Final = {code: reason for reason, code in _REASON_CODES.items()}


@dataclass(frozen=True)
class ActivationRecord:
    """One decided activation request, exactly as appended to the log."""

    content_id: ContentId
    fingerprint_digest: bytes
    attribute_digests: tuple[tuple[str, bytes], ...]
    email: str
    timestamp: int
    outcome: Outcome
    reason: Reason | None = None

    def to_bytes(self) -> bytes:
        email = self.email.encode("utf-8")
        out = bytearray()
        out += struct.pack("<B", _RECORD_VERSION)
        out += self.content_id.value
        out += self.fingerprint_digest
        out += struct.pack(
            "<BBQ",
            _OUTCOME_CODES[self.outcome],
            _REASON_CODES[self.reason],
            self.timestamp,
        )
        out += struct.pack("<H", len(email))
        out += email
        out += struct.pack("<H", len(self.attribute_digests))
        for name, digest in self.attribute_digests:
            encoded = name.encode("utf-8")
            out += struct.pack("<H", len(encoded))
            out += encoded
            out += digest
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ActivationRecord":
        try:
            view = memoryview(data)
            pos = 0

            def take(n: int) -> bytes:
                nonlocal pos
                if pos + n > len(view):
                    raise ValueError("record truncated")
                out = bytes(view[pos : pos + n])
                pos += n
                return out

            (version,) = struct.unpack("<B", take(1))
            if version != _RECORD_VERSION:
                raise ValueError(f"unsupported record version {version}")
            content_id = ContentId(take(16))
            fingerprint_digest = take(DIGEST_LEN)
            outcome_code, reason_code, timestamp = struct.unpack("<BBQ", take(10))
            (email_len,) = struct.unpack("<H", take(2))
            email = take(email_len).decode("utf-8")
            (attr_count,) = struct.unpack("<H", take(2))
            attrs = []
            for _ in range(attr_count):
                (name_len,) = struct.unpack("<H", take(2))
                name = take(name_len).decode("utf-8")
                attrs.append((name, take(DIGEST_LEN)))
            if pos != len(view):
                raise ValueError("trailing bytes in record")
            return cls(
                content_id=content_id,
                fingerprint_digest=fingerprint_digest,
                attribute_digests=tuple(attrs),
                email=email,
                timestamp=timestamp,
                outcome=_OUTCOME_BY_CODE[outcome_code],
                reason=_REASON_BY_CODE[reason_code],
            )
        except (KeyError, ValueError, UnicodeDecodeError) as exc:
            raise LedgerError(f"undecodable ledger record: {exc}") from exc


@dataclass
class ProductRegistration:
    content_id: ContentId
    master_key: bytes
    policy: PolicyMode
    status: ProductStatus = ProductStatus.ACTIVE


@dataclass(frozen=True)
class LedgerStats:
    grants: int
    denials: int
    distinct_machines: int
    status: ProductStatus


@dataclass
class _CopyState:
    granted: set[bytes] = field(default_factory=set)
    grants: int = 0
    denials: int = 0
    stolen: bool = False


class ActivationLedger:
    """Durable activation history for every registered copy.

    All mutating methods are safe to call from multiple threads; callers
    that need a decision and its append to be one atomic step must hold
    their own per-content critical section around both.
    """

    def __init__(self, directory: str | Path) -> None:
        self._dir = Path(directory)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._products: dict[bytes, ProductRegistration] = {}
        self._state: dict[bytes, _CopyState] = {}
        self._records: list[ActivationRecord] = []
        self._load_products()
        self._events = self._replay_and_open()

    # -- persistence -------------------------------------------------

    @property
    def directory(self) -> Path:
        return self._dir

    def _events_path(self) -> Path:
        return self._dir / EVENTS_FILE

    def _products_path(self) -> Path:
        return self._dir / PRODUCTS_FILE

    def _load_products(self) -> None:
        path = self._products_path()
        if not path.exists():
            return
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            for id_hex, entry in doc["products"].items():
                content_id = ContentId.from_hex(id_hex)
                master_key = bytes.fromhex(entry["master_key"])
                if len(master_key) != KEY_LEN:
                    raise ValueError("master key has wrong length")
                self._products[content_id.value] = ProductRegistration(
                    content_id=content_id,
                    master_key=master_key,
                    policy=PolicyMode.from_json(entry["policy"]),
                )
        except (KeyError, TypeError, ValueError) as exc:
            raise LedgerError(f"invalid product table {path}: {exc}") from exc

    def _save_products(self) -> None:
        doc = {
            "version": 1,
            "products": {
                reg.content_id.hex: {
                    "master_key": reg.master_key.hex(),
                    "policy": reg.policy.to_json(),
                }
                for reg in self._products.values()
            },
        }
        tmp = self._products_path().with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._products_path())

    def _replay_and_open(self):
        path = self._events_path()
        valid_end = 0
        if path.exists():
            data = path.read_bytes()
            pos = 0
            while pos < len(data):
                if pos + 4 > len(data):
                    break
                (length,) = struct.unpack("<I", data[pos : pos + 4])
                if pos + 4 + length > len(data):
                    break
                record = ActivationRecord.from_bytes(data[pos + 4 : pos + 4 + length])
                self._apply(record)
                self._records.append(record)
                pos += 4 + length
            valid_end = pos
            if valid_end < len(data):
                _log.warning(
                    "ledger %s: dropping %d bytes of truncated trailing record",
                    path,
                    len(data) - valid_end,
                )
        fh = open(path, "ab")
        if path.stat().st_size != valid_end:
            fh.truncate(valid_end)
        return fh

    def _apply(self, record: ActivationRecord) -> None:
        state = self._state.setdefault(record.content_id.value, _CopyState())
        if record.outcome == Outcome.GRANTED:
            state.grants += 1
            state.granted.add(record.fingerprint_digest)
        else:
            state.denials += 1
        if record.outcome == Outcome.DENIED_STOLEN:
            state.stolen = True

    # -- registrations -----------------------------------------------

    def register(self, content_id: ContentId, master_key: bytes, policy: PolicyMode) -> None:
        """Add a product.

        Raises:
            RegistrationConflictError: the id is already registered.
        """
        if len(master_key) != KEY_LEN:
            raise ValueError(f"master key must be {KEY_LEN} bytes")
        with self._lock:
            if content_id.value in self._products:
                raise RegistrationConflictError(
                    f"content id {content_id.hex} is already registered"
                )
            self._products[content_id.value] = ProductRegistration(
                content_id=content_id, master_key=master_key, policy=policy
            )
            self._save_products()

    def set_policy(self, content_id: ContentId, policy: PolicyMode) -> None:
        """Switch a product's policy; history is kept, not rewritten.

        Raises:
            UnknownContentError: the id is not registered.
        """
        with self._lock:
            reg = self._products.get(content_id.value)
            if reg is None:
                raise UnknownContentError(f"content id {content_id.hex} is not registered")
            reg.policy = policy
            self._save_products()

    def registration(self, content_id: ContentId) -> ProductRegistration | None:
        with self._lock:
            reg = self._products.get(content_id.value)
            if reg is None:
                return None
            state = self._state.get(content_id.value)
            reg.status = (
                ProductStatus.STOLEN
                if state is not None and state.stolen
                else ProductStatus.ACTIVE
            )
            return reg

    # -- history -----------------------------------------------------

    def view(self, content_id: ContentId) -> LedgerView:
        """Immutable snapshot of one copy's history for the policy engine."""
        with self._lock:
            state = self._state.get(content_id.value)
            if state is None:
                return LedgerView()
            return LedgerView(
                status=ProductStatus.STOLEN if state.stolen else ProductStatus.ACTIVE,
                granted=frozenset(state.granted),
            )

    def append(self, record: ActivationRecord) -> None:
        """Durably append one record, then fold it into in-memory state.

        The write is flushed and fsynced before this method returns, so a
        caller that responds only afterwards never acknowledges an
        activation the log does not hold.
        """
        payload = record.to_bytes()
        frame = struct.pack("<I", len(payload)) + payload
        with self._lock:
            self._events.write(frame)
            self._events.flush()
            os.fsync(self._events.fileno())
            self._apply(record)
            self._records.append(record)

    def stats(self, content_id: ContentId) -> LedgerStats:
        """Aggregate counters for one registered copy.

        Raises:
            UnknownContentError: the id is not registered.
        """
        with self._lock:
            if content_id.value not in self._products:
                raise UnknownContentError(f"content id {content_id.hex} is not registered")
            state = self._state.get(content_id.value, _CopyState())
            return LedgerStats(
                grants=state.grants,
                denials=state.denials,
                distinct_machines=len(state.granted),
                status=ProductStatus.STOLEN if state.stolen else ProductStatus.ACTIVE,
            )

    def records(self, content_id: ContentId | None = None) -> Iterator[ActivationRecord]:
        with self._lock:
            snapshot = list(self._records)
        for record in snapshot:
            if content_id is None or record.content_id == content_id:
                yield record

    def close(self) -> None:
        with self._lock:
            if not self._events.closed:
                self._events.close()

    def __enter__(self) -> "ActivationLedger":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
