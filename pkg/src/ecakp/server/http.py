"""HTTP front end and the JSON wire codec shared with the client.

Endpoints, all JSON bodies, digests hex-encoded, licenses base64:

* ``POST /v1/activate`` decides an activation request (public).
* ``GET /v1/server-key`` returns the license verification key (public).
* ``POST /v1/products`` registers a product (admin).
* ``PUT /v1/products/{id}/policy`` switches a product policy (admin).
* ``GET /v1/products/{id}/stats`` returns per-copy counters (admin).

Admin routes demand ``Authorization: Bearer <token>`` where the token
comes from the ``ECAKP_ADMIN_TOKEN`` environment variable; without it
configured they answer 503. The path prefix versions the wire format so
a secure channel and v2 schema can wrap it later without breaking v1.
"""

from __future__ import annotations

import base64
import binascii
import hmac
import json
import logging
import os
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Final

from ..container import ContentId
from ..crypto import public_key_bytes
from ..errors import (
    InputError,
    LicenseParseError,
    ProtocolError,
    RegistrationConflictError,
    UnknownContentError,
)
from ..licensing import LicenseFile
from .policy import PolicyMode, Reason
from .service import ActivationRequest, ActivationResponse, ActivationService

_log = logging.getLogger(__name__)

ADMIN_TOKEN_ENV: Final = "ECAKP_ADMIN_TOKEN"

_STATS_ROUTE: Final = re.compile(r"\A/v1/products/([0-9a-fA-F]{32})/stats\Z")
_POLICY_ROUTE: Final = re.compile(r"\A/v1/products/([0-9a-fA-F]{32})/policy\Z")


# -- wire codec ------------------------------------------------------


def _hex_field(body: dict, key: str, length: int) -> bytes:
    value = body.get(key)
    if not isinstance(value, str):
        raise ProtocolError(f"missing or non-string field {key!r}")
    try:
        raw = bytes.fromhex(value)
    except ValueError:
        raise ProtocolError(f"field {key!r} is not valid hex") from None
    if len(raw) != length:
        raise ProtocolError(f"field {key!r} must be {length} bytes")
    return raw


def request_to_json(request: ActivationRequest) -> dict:
    return {
        "content_id": request.content_id.hex,
        "fingerprint_digest": request.fingerprint_digest.hex(),
        "attribute_digests": [
            {"name": name, "digest": digest.hex()}
            for name, digest in request.attribute_digests
        ],
        "email": request.email,
    }


def request_from_json(body: dict) -> ActivationRequest:
    """Decode and validate an activation request body.

    Raises:
        ProtocolError: structurally invalid body or field values.
    """
    if not isinstance(body, dict):
        raise ProtocolError("request body must be a JSON object")
    entries = body.get("attribute_digests")
    if not isinstance(entries, list):
        raise ProtocolError("attribute_digests must be a list")
    digests = []
    for entry in entries:
        if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
            raise ProtocolError("attribute_digests entries must carry a name")
        digests.append((entry["name"], _hex_field(entry, "digest", 32)))
    email = body.get("email")
    if not isinstance(email, str):
        raise ProtocolError("missing or non-string field 'email'")
    return ActivationRequest(
        content_id=ContentId(_hex_field(body, "content_id", 16)),
        fingerprint_digest=_hex_field(body, "fingerprint_digest", 32),
        attribute_digests=tuple(digests),
        email=email,
    )


def response_to_json(response: ActivationResponse) -> dict:
    if response.granted:
        assert response.license is not None
        return {
            "granted": True,
            "license": base64.b64encode(response.license.to_bytes()).decode("ascii"),
        }
    return {
        "granted": False,
        "reason": response.reason.value if response.reason else None,
    }


def response_from_json(body: dict) -> ActivationResponse:
    """Decode an activation response body.

    Raises:
        ProtocolError: the body does not follow the wire schema.
    """
    if not isinstance(body, dict) or not isinstance(body.get("granted"), bool):
        raise ProtocolError("response body must carry a boolean 'granted'")
    if body["granted"]:
        encoded = body.get("license")
        if not isinstance(encoded, str):
            raise ProtocolError("granted response carries no license")
        try:
            license_file = LicenseFile.from_bytes(
                base64.b64decode(encoded, validate=True)
            )
        except (binascii.Error, LicenseParseError) as exc:
            raise ProtocolError(f"undecodable license in response: {exc}") from exc
        return ActivationResponse(granted=True, license=license_file)
    reason_text = body.get("reason")
    try:
        reason = Reason(reason_text) if reason_text is not None else None
    except ValueError:
        raise ProtocolError(f"unknown denial reason {reason_text!r}") from None
    return ActivationResponse(granted=False, reason=reason)


# -- server ----------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    server_version = "ecakp/1"
    protocol_version = "HTTP/1.1"

    # Injected by ActivationHttpServer.
    service: ActivationService
    admin_token: str | None

    def log_message(self, fmt: str, *args) -> None:
        _log.debug("%s %s", self.address_string(), fmt % args)

    # -- plumbing --

    def _read_json(self) -> dict:
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            raise ProtocolError("invalid Content-Length") from None
        if length <= 0:
            raise ProtocolError("missing request body")
        raw = self.rfile.read(length)
        try:
            return json.loads(raw)
        except ValueError:
            raise ProtocolError("request body is not valid JSON") from None

    def _send(self, status: int, body: dict) -> None:
        payload = json.dumps(body, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _send_error(self, status: int, message: str) -> None:
        self._send(status, {"error": message})

    def _admin_ok(self) -> bool:
        if not self.admin_token:
            self._send_error(503, "admin token is not configured on this server")
            return False
        header = self.headers.get("Authorization", "")
        scheme, _, token = header.partition(" ")
        if scheme.lower() != "bearer" or not hmac.compare_digest(token.strip(), self.admin_token):
            self._send_error(401, "missing or invalid admin token")
            return False
        return True

    # -- routes --

    def do_POST(self) -> None:
        try:
            if self.path == "/v1/activate":
                request = request_from_json(self._read_json())
                response = self.service.activate(request)
                self._send(200, response_to_json(response))
            elif self.path == "/v1/products":
                if self._admin_ok():
                    self._register(self._read_json())
            else:
                self._send_error(404, "no such endpoint")
        except ProtocolError as exc:
            self._send_error(400, str(exc))
        except Exception:
            _log.exception("unhandled error serving %s", self.path)
            self._send_error(500, "internal error")

    def do_GET(self) -> None:
        try:
            if self.path == "/v1/server-key":
                self._send(
                    200,
                    {
                        "algorithm": "ed25519",
                        "public_key": public_key_bytes(self.service.public_key).hex(),
                    },
                )
                return
            match = _STATS_ROUTE.match(self.path)
            if match:
                if self._admin_ok():
                    self._stats(match.group(1))
                return
            self._send_error(404, "no such endpoint")
        except Exception:
            _log.exception("unhandled error serving %s", self.path)
            self._send_error(500, "internal error")

    def do_PUT(self) -> None:
        try:
            match = _POLICY_ROUTE.match(self.path)
            if match:
                if self._admin_ok():
                    self._set_policy(match.group(1), self._read_json())
                return
            self._send_error(404, "no such endpoint")
        except ProtocolError as exc:
            self._send_error(400, str(exc))
        except Exception:
            _log.exception("unhandled error serving %s", self.path)
            self._send_error(500, "internal error")

    # -- admin operations --

    def _register(self, body: dict) -> None:
        try:
            content_id = ContentId(_hex_field(body, "content_id", 16))
            master_key = _hex_field(body, "master_key", 32)
            policy = PolicyMode.from_json(body.get("policy", {}))
        except InputError as exc:
            self._send_error(400, str(exc))
            return
        try:
            self.service.ledger.register(content_id, master_key, policy)
        except RegistrationConflictError as exc:
            self._send_error(409, str(exc))
            return
        self._send(201, {"registered": content_id.hex})

    def _set_policy(self, id_hex: str, body: dict) -> None:
        try:
            policy = PolicyMode.from_json(body.get("policy", {}))
        except InputError as exc:
            self._send_error(400, str(exc))
            return
        try:
            self.service.ledger.set_policy(ContentId.from_hex(id_hex), policy)
        except UnknownContentError as exc:
            self._send_error(404, str(exc))
            return
        self._send(200, {"policy": policy.to_json()})

    def _stats(self, id_hex: str) -> None:
        try:
            stats = self.service.ledger.stats(ContentId.from_hex(id_hex))
        except UnknownContentError as exc:
            self._send_error(404, str(exc))
            return
        self._send(
            200,
            {
                "grants": stats.grants,
                "denials": stats.denials,
                "distinct_machines": stats.distinct_machines,
                "status": stats.status.value,
            },
        )


class ActivationHttpServer:
    """Threaded HTTP server wrapper usable from tests and the CLI.

    Binding to port 0 picks a free port; ``endpoint`` reports the real
    address. Each connection is handled on its own thread, so the
    service's per-content locking is what serializes same-copy requests.
    """

    def __init__(
        self,
        service: ActivationService,
        host: str = "127.0.0.1",
        port: int = 0,
        admin_token: str | None = None,
    ) -> None:
        if admin_token is None:
            admin_token = os.environ.get(ADMIN_TOKEN_ENV)
        handler = type(
            "BoundHandler", (_Handler,), {"service": service, "admin_token": admin_token}
        )
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ActivationHttpServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "ActivationHttpServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()
