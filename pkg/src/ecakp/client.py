"""Client lifecycle: request activation, then play under the guard.

Activation builds a fingerprinted request, POSTs it through the network
gate, verifies the returned license against the server's published key
and only then persists it. Playback re-checks the machine identity,
sweeps the process table, closes the network gate and renders the
recovered plaintext through a sink; the default sink discards bytes while
the session reports count and CRC so callers can confirm integrity.
"""

from __future__ import annotations

import enum
import json
import os
import tempfile
import urllib.error
import urllib.request
import uuid
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Final, Protocol, Sequence

from .container import ContentId, EncryptedContainer, read_container, unpack
from .crypto import public_key_from_bytes
from .errors import (
    InputError,
    LicenseVerificationError,
    ProtocolError,
    RegistrationConflictError,
    ResponseVerificationError,
    TransportError,
    UnknownContentError,
    WrongMachineError,
)
from .guard import (
    GuardPolicy,
    GuardReport,
    HostExecutor,
    KillExecutor,
    NetworkGate,
    Phase,
    ProcessEntry,
    host_processes,
    require_clean_enforcement,
    run_guard,
)
from .identity import (
    DEFAULT_TOLERANCE,
    SystemProbe,
    collect_attributes,
    fingerprint,
    matches,
)
from .licensing import (
    LicenseFile,
    config_home,
    default_license_path,
    load_license,
    save_license,
    unwrap_content_key,
    verify_license,
)
from .server.http import request_from_json, request_to_json, response_from_json
from .server.policy import Reason
from .server.service import ActivationRequest, validate_email

DEFAULT_CHUNK: Final = 64 * 1024
_SELF_NAME: Final = "ecakp"


def build_request(
    content_id_text: str,
    email: str,
    probe: SystemProbe | None = None,
) -> ActivationRequest:
    """Assemble an activation request from user input and this machine.

    Raises:
        InputError: malformed content id or email.
        IdentityError: no machine attribute could be collected.
    """
    try:
        content_id = ContentId.from_hex(content_id_text)
    except ValueError:
        raise InputError(
            f"content id must be 32 hex characters, got {content_id_text!r}"
        ) from None
    try:
        validate_email(email)
    except ProtocolError as exc:
        raise InputError(str(exc)) from None
    machine = fingerprint(collect_attributes(probe))
    return ActivationRequest(
        content_id=content_id,
        fingerprint_digest=machine.digest,
        attribute_digests=machine.attribute_digests,
        email=email,
    )


# -- transport -------------------------------------------------------


def _http_json(
    url: str,
    gate: NetworkGate,
    body: dict | None = None,
    timeout: float = 10.0,
) -> dict:
    """One JSON exchange, gated; POST when a body is given, GET otherwise."""
    gate.check()
    data = None
    headers = {"Accept": "application/json"}
    if body is not None:
        data = json.dumps(body).encode("utf-8")
        headers["Content-Type"] = "application/json"
    request = urllib.request.Request(url, data=data, headers=headers)
    try:
        with urllib.request.urlopen(request, timeout=timeout) as reply:
            raw = reply.read()
    except urllib.error.HTTPError as exc:
        detail = _error_detail(exc)
        if 400 <= exc.code < 500:
            raise ProtocolError(f"server rejected request ({exc.code}): {detail}") from None
        raise TransportError(f"server error ({exc.code}): {detail}") from None
    except (urllib.error.URLError, OSError) as exc:
        raise TransportError(f"cannot reach activation server: {exc}") from exc
    try:
        return json.loads(raw)
    except ValueError:
        raise ProtocolError("server reply is not valid JSON") from None


def _error_detail(exc: urllib.error.HTTPError) -> str:
    try:
        return json.loads(exc.read()).get("error", "")
    except Exception:
        return exc.reason if isinstance(exc.reason, str) else "unspecified"


def admin_call(
    endpoint: str,
    method: str,
    path: str,
    token: str,
    body: dict,
    timeout: float = 10.0,
) -> dict:
    """Authenticated admin exchange (register, policy switch, stats).

    Raises:
        RegistrationConflictError: the server answered 409.
        UnknownContentError: the server answered 404.
        ProtocolError / TransportError: as for activation calls.
    """
    gate = NetworkGate()
    gate.check()
    data = json.dumps(body).encode("utf-8") if body is not None else None
    request = urllib.request.Request(
        f"{endpoint.rstrip('/')}{path}",
        data=data,
        headers={
            "Content-Type": "application/json",
            "Authorization": f"Bearer {token}",
        },
        method=method,
    )
    try:
        with urllib.request.urlopen(request, timeout=timeout) as reply:
            return json.loads(reply.read())
    except urllib.error.HTTPError as exc:
        detail = _error_detail(exc)
        if exc.code == 409:
            raise RegistrationConflictError(detail) from None
        if exc.code == 404:
            raise UnknownContentError(detail) from None
        if 400 <= exc.code < 500:
            raise ProtocolError(f"server rejected request ({exc.code}): {detail}") from None
        raise TransportError(f"server error ({exc.code}): {detail}") from None
    except (urllib.error.URLError, OSError) as exc:
        raise TransportError(f"cannot reach activation server: {exc}") from exc
    except ValueError:
        raise ProtocolError("server reply is not valid JSON") from None


def fetch_server_key(endpoint: str, gate: NetworkGate, timeout: float = 10.0) -> bytes:
    body = _http_json(f"{endpoint.rstrip('/')}/v1/server-key", gate, timeout=timeout)
    key_hex = body.get("public_key")
    if body.get("algorithm") != "ed25519" or not isinstance(key_hex, str):
        raise ProtocolError("server key reply is malformed")
    try:
        raw = bytes.fromhex(key_hex)
    except ValueError:
        raise ProtocolError("server key is not valid hex") from None
    if len(raw) != 32:
        raise ProtocolError("server key has wrong length")
    return raw


def server_key_path(content_id: ContentId, home: str | Path | None = None) -> Path:
    return config_home(home) / "keys" / f"{content_id.hex}.pub"


@dataclass(frozen=True)
class ActivationOutcome:
    granted: bool
    reason: Reason | None = None
    license: LicenseFile | None = None
    license_path: Path | None = None

    def describe(self) -> str:
        if self.granted:
            return f"activation granted; license stored at {self.license_path}"
        if self.reason == Reason.STOLEN:
            return "activation denied: this copy has been marked stolen"
        if self.reason == Reason.LIMIT_REACHED:
            return "activation denied: the activation limit for this copy is used up"
        if self.reason == Reason.WRONG_MACHINE:
            return "activation denied: this copy is locked to a different machine"
        if self.reason == Reason.UNKNOWN_CONTENT:
            return "activation denied: the server does not know this content id"
        return "activation denied"


def request_activation(
    endpoint: str,
    request: ActivationRequest,
    home: str | Path | None = None,
    gate: NetworkGate | None = None,
    timeout: float = 10.0,
) -> ActivationOutcome:
    """POST an activation request and persist a verified license.

    The license is atomically written only after its signature checks out
    against the key the server publishes and its binding matches what was
    requested; a reply that fails verification is dropped.

    Raises:
        TransportError: network-level failure; safe to retry.
        ProtocolError: malformed reply or rejected request.
        ResponseVerificationError: granted reply whose license does not
            verify; nothing is persisted.
    """
    gate = gate if gate is not None else NetworkGate()
    with gate.entering(Phase.ACTIVATION):
        body = _http_json(
            f"{endpoint.rstrip('/')}/v1/activate",
            gate,
            body=request_to_json(request),
            timeout=timeout,
        )
        response = response_from_json(body)
        if not response.granted:
            return ActivationOutcome(granted=False, reason=response.reason)

        assert response.license is not None
        license_file = response.license
        key_raw = fetch_server_key(endpoint, gate, timeout=timeout)

    if not verify_license(license_file, public_key_from_bytes(key_raw)):
        raise ResponseVerificationError("license signature does not verify")
    if license_file.content_id != request.content_id:
        raise ResponseVerificationError("license is bound to a different content id")
    if license_file.fingerprint_digest != request.fingerprint_digest:
        raise ResponseVerificationError("license is bound to a different machine")

    path = default_license_path(request.content_id, home)
    save_license(license_file, path)
    key_path = server_key_path(request.content_id, home)
    key_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = key_path.with_name(key_path.name + ".tmp")
    tmp.write_text(key_raw.hex() + "\n", encoding="utf-8")
    os.replace(tmp, key_path)
    return ActivationOutcome(
        granted=True, license=license_file, license_path=path
    )


# -- playback --------------------------------------------------------


class PlaybackMode(enum.Enum):
    IN_MEMORY = "in-memory"
    TEMP_FILE = "temp-file"


class PlaybackSink(Protocol):
    """Receives rendered plaintext in order; a media player stand-in."""

    def write(self, chunk: bytes) -> None: ...

    def finish(self) -> None: ...


class NullRenderer:
    """Default sink: discards bytes, keeping only a count."""

    def __init__(self) -> None:
        self.bytes_seen = 0
        self.finished = False

    def write(self, chunk: bytes) -> None:
        self.bytes_seen += len(chunk)

    def finish(self) -> None:
        self.finished = True


@dataclass(frozen=True)
class PlaybackSession:
    """What one play run did, for display and assertions."""

    content_id: ContentId
    mode: PlaybackMode
    bytes_played: int
    crc_ok: bool
    guard_report: GuardReport
    license_path: Path
    temp_path: Path | None = None


def _load_server_key(
    content_id: ContentId,
    home: str | Path | None,
    override: str | Path | None,
) -> bytes:
    path = Path(override) if override is not None else server_key_path(content_id, home)
    try:
        return bytes.fromhex(path.read_text(encoding="utf-8").strip())
    except OSError:
        raise LicenseVerificationError(
            f"no server key at {path}; activate first or pass an explicit key file"
        ) from None
    except ValueError:
        raise LicenseVerificationError(f"server key file {path} is not valid hex") from None


def play(
    container_path: str | Path,
    license_path: str | Path | None = None,
    home: str | Path | None = None,
    server_key_file: str | Path | None = None,
    probe: SystemProbe | None = None,
    tolerance: int = DEFAULT_TOLERANCE,
    mode: PlaybackMode = PlaybackMode.IN_MEMORY,
    sink: PlaybackSink | None = None,
    guard_policy: GuardPolicy | None = None,
    processes: Sequence[ProcessEntry] | None = None,
    executor: KillExecutor | None = None,
    dry_run: bool = True,
    self_name: str = _SELF_NAME,
    gate: NetworkGate | None = None,
    chunk_size: int = DEFAULT_CHUNK,
) -> PlaybackSession:
    """Decrypt and render one container under the full client posture.

    Order of checks: license loads and verifies, the machine matches
    (before any decryption), the guard sweeps, and only then is the key
    unwrapped and the payload opened. The network gate stays closed for
    the whole decrypt-and-render phase. In temp-file mode the plaintext
    passes through a uniquely named file that is always deleted, even on
    a failing render.

    Raises:
        WrongMachineError: identity drifted beyond tolerance.
        LicenseVerificationError: missing server key or bad signature.
        GuardRefusalError: live enforcement left a process running.
        TamperedPayloadError / CorruptionError: the container is bad.
    """
    container: EncryptedContainer = (
        container_path
        if isinstance(container_path, EncryptedContainer)
        else read_container(container_path)
    )
    resolved_license_path = (
        Path(license_path)
        if license_path is not None
        else default_license_path(container.content_id, home)
    )
    license_file = load_license(resolved_license_path)
    if license_file.content_id != container.content_id:
        raise InputError(
            "license was issued for a different content id than this container"
        )
    key_raw = _load_server_key(container.content_id, home, server_key_file)
    if not verify_license(license_file, public_key_from_bytes(key_raw)):
        raise LicenseVerificationError("license signature does not verify")

    current = collect_attributes(probe)
    if not matches(license_file.stored_fingerprint(), current, tolerance):
        raise WrongMachineError("license is not valid for this machine")

    guard_policy = guard_policy if guard_policy is not None else GuardPolicy()
    report = run_guard(
        processes if processes is not None else host_processes(),
        guard_policy,
        self_name,
        executor if executor is not None else HostExecutor(),
        dry_run=dry_run,
        phase=Phase.PLAYBACK,
    )
    require_clean_enforcement(report)

    gate = gate if gate is not None else NetworkGate(guard_policy)
    sink = sink if sink is not None else NullRenderer()
    with gate.entering(Phase.PLAYBACK):
        content_key = unwrap_content_key(license_file, current, tolerance)
        plaintext = unpack(container, content_key)
        if mode == PlaybackMode.TEMP_FILE:
            bytes_played, crc, temp_path = _render_via_temp_file(
                plaintext, sink, chunk_size
            )
        else:
            bytes_played, crc = _render(memoryview(plaintext), sink, chunk_size)
            temp_path = None
    sink.finish()
    return PlaybackSession(
        content_id=container.content_id,
        mode=mode,
        bytes_played=bytes_played,
        crc_ok=crc == container.crc32 and bytes_played % 2**32 == container.isize,
        guard_report=report,
        license_path=resolved_license_path,
        temp_path=temp_path,
    )


def _render(data: memoryview, sink: PlaybackSink, chunk_size: int) -> tuple[int, int]:
    total = 0
    crc = 0
    for start in range(0, len(data), chunk_size):
        chunk = bytes(data[start : start + chunk_size])
        crc = zlib.crc32(chunk, crc)
        sink.write(chunk)
        total += len(chunk)
    if len(data) == 0:
        sink.write(b"")
    return total, crc


def _render_via_temp_file(
    plaintext: bytes, sink: PlaybackSink, chunk_size: int
) -> tuple[int, int, Path]:
    temp_path = Path(tempfile.gettempdir()) / f"Temp{uuid.uuid4().hex}"
    try:
        temp_path.write_bytes(plaintext)
        total = 0
        crc = 0
        with open(temp_path, "rb") as fh:
            while True:
                chunk = fh.read(chunk_size)
                if not chunk:
                    break
                crc = zlib.crc32(chunk, crc)
                sink.write(chunk)
                total += len(chunk)
        if total == 0:
            sink.write(b"")
        return total, crc, temp_path
    finally:
        # The cleartext staging file never outlives the session.
        try:
            temp_path.unlink()
        except FileNotFoundError:
            pass


__all__ = [
    "ActivationOutcome",
    "ActivationRequest",
    "NullRenderer",
    "PlaybackMode",
    "PlaybackSession",
    "PlaybackSink",
    "build_request",
    "fetch_server_key",
    "play",
    "request_activation",
    "request_from_json",
    "server_key_path",
]
