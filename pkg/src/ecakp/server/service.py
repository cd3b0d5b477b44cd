"""Activation service: validates requests, decides, records and issues.

The service serializes work per content id: deciding from the history
view, appending the record and issuing the license happen inside one
critical section, so concurrent requests for the same copy observe each
other's grants and a strict copy can never be granted twice.

Record-before-respond: the ledger append (fsynced) precedes the response
on every path, so a crash after the append loses at most the reply, never
the history. Signing happens before the append; a signing failure
therefore produces an internal error and no record.
"""

from __future__ import annotations

import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Final

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from ..container import ContentId
from ..crypto import DIGEST_LEN
from ..errors import ProtocolError
from ..identity import MachineFingerprint
from ..licensing import LicenseFile, issue_license
from .ledger import ActivationLedger, ActivationRecord
from .policy import Decision, Outcome, Reason, decide

# Test hook: hard-exit after the n-th ledger append, before the response
# is built, to exercise crash recovery.
FAULT_EXIT_ENV: Final = "ECAKP_FAULT_EXIT_AFTER_APPEND"
_FAULT_EXIT_CODE: Final = 86


def validate_email(email: str) -> None:
    """Accept exactly one '@' with non-empty parts on both sides.

    Raises:
        ProtocolError: the address fails that shape check.
    """
    local, sep, domain = email.partition("@")
    if not sep or not local or not domain or "@" in domain:
        raise ProtocolError(f"invalid email address: {email!r}")


@dataclass(frozen=True)
class ActivationRequest:
    content_id: ContentId
    fingerprint_digest: bytes
    attribute_digests: tuple[tuple[str, bytes], ...]
    email: str

    def __post_init__(self) -> None:
        if len(self.fingerprint_digest) != DIGEST_LEN:
            raise ProtocolError("fingerprint digest must be 32 bytes")
        for name, digest in self.attribute_digests:
            if not name or len(digest) != DIGEST_LEN:
                raise ProtocolError("malformed attribute digest entry")
        validate_email(self.email)

    def machine(self) -> MachineFingerprint:
        return MachineFingerprint(
            digest=self.fingerprint_digest,
            attribute_digests=self.attribute_digests,
        )


@dataclass(frozen=True)
class ActivationResponse:
    granted: bool
    license: LicenseFile | None = None
    reason: Reason | None = None


class ActivationService:
    """Decision pipeline shared by the HTTP server and in-process tests."""

    def __init__(
        self,
        ledger: ActivationLedger,
        signing_key: Ed25519PrivateKey,
        crash_after_appends: int | None = None,
    ) -> None:
        self._ledger = ledger
        self._signing_key = signing_key
        self._locks: defaultdict[bytes, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()
        self._appends = 0
        if crash_after_appends is None:
            env = os.environ.get(FAULT_EXIT_ENV)
            crash_after_appends = int(env) if env else None
        self._crash_after_appends = crash_after_appends

    @property
    def ledger(self) -> ActivationLedger:
        return self._ledger

    @property
    def public_key(self):
        return self._signing_key.public_key()

    def _content_lock(self, content_id: ContentId) -> threading.Lock:
        with self._locks_guard:
            return self._locks[content_id.value]

    def activate(self, request: ActivationRequest) -> ActivationResponse:
        """Decide one activation request and durably record the outcome.

        Every well-formed request leaves a record, including denials for
        ids nobody registered. Malformed requests raise before any state
        is touched.
        """
        with self._content_lock(request.content_id):
            registration = self._ledger.registration(request.content_id)
            if registration is None:
                decision = Decision(Outcome.DENIED, Reason.UNKNOWN_CONTENT)
                license_file = None
            else:
                decision = decide(
                    registration.policy,
                    self._ledger.view(request.content_id),
                    request.fingerprint_digest,
                )
                license_file = None
                if decision.granted:
                    license_file = issue_license(
                        request.content_id,
                        request.machine(),
                        registration.master_key,
                        self._signing_key,
                    )
            self._ledger.append(
                ActivationRecord(
                    content_id=request.content_id,
                    fingerprint_digest=request.fingerprint_digest,
                    attribute_digests=request.attribute_digests,
                    email=request.email,
                    timestamp=int(time.time()),
                    outcome=decision.outcome,
                    reason=decision.reason,
                )
            )
            self._appends += 1
            if self._crash_after_appends is not None and self._appends >= self._crash_after_appends:
                os._exit(_FAULT_EXIT_CODE)
        return ActivationResponse(
            granted=decision.granted,
            license=license_file,
            reason=decision.reason,
        )
