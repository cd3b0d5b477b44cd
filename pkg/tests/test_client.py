"""Client behavior: request building, activation persistence and playback."""

from __future__ import annotations

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest

from ecakp import client
from ecakp.container import ContentId, PackagingSecret, pack, write_container
from ecakp.crypto import generate_signing_key, public_key_bytes
from ecakp.errors import (
    GuardRefusalError,
    InputError,
    LicenseVerificationError,
    NetworkBlockedError,
    ResponseVerificationError,
    TamperedPayloadError,
    TransportError,
    WrongMachineError,
)
from ecakp.guard import NetworkGate, Phase, ProcessEntry, RecordingExecutor
from ecakp.identity import AttributeSet, StaticProbe, fingerprint
from ecakp.licensing import issue_license
from ecakp.server.http import ActivationHttpServer
from ecakp.server.ledger import ActivationLedger
from ecakp.server.policy import PolicyMode, Reason
from ecakp.server.service import ActivationService

from conftest import MACHINE_ALPHA, MACHINE_BETA

PROCS = [ProcessEntry("svchost", 1), ProcessEntry("rogue", 2)]


@pytest.fixture
def stack(tmp_path, product, signing_key):
    """Running server plus a packed container on disk."""
    content_id, secret, plaintext, container = product
    container_path = tmp_path / "media.ecakp"
    write_container(container, container_path)
    ledger = ActivationLedger(tmp_path / "ledger")
    ledger.register(content_id, secret.master_key(content_id), PolicyMode.strict())
    service = ActivationService(ledger, signing_key)
    with ActivationHttpServer(service) as srv:
        yield {
            "endpoint": srv.endpoint,
            "content_id": content_id,
            "secret": secret,
            "plaintext": plaintext,
            "container_path": container_path,
            "home": tmp_path / "home",
            "ledger": ledger,
        }
    ledger.close()


def activate(stack, probe=None) -> client.ActivationOutcome:
    request = client.build_request(
        stack["content_id"].hex,
        "buyer@example.com",
        probe=probe if probe is not None else StaticProbe(MACHINE_ALPHA),
    )
    return client.request_activation(stack["endpoint"], request, home=stack["home"])


class TestBuildRequest:
    def test_builds_from_probe(self):
        request = client.build_request(
            "00" * 16, "a@b", probe=StaticProbe(MACHINE_ALPHA)
        )
        machine = fingerprint(AttributeSet.from_pairs(MACHINE_ALPHA))
        assert request.fingerprint_digest == machine.digest
        assert request.content_id == ContentId(bytes(16))

    @pytest.mark.parametrize("bad_id", ["", "xyz", "00" * 15, "00" * 17, "g" * 32])
    def test_rejects_malformed_id(self, bad_id):
        with pytest.raises(InputError, match="32 hex"):
            client.build_request(bad_id, "a@b", probe=StaticProbe(MACHINE_ALPHA))

    def test_rejects_malformed_email(self):
        with pytest.raises(InputError):
            client.build_request("00" * 16, "no-at-sign", probe=StaticProbe(MACHINE_ALPHA))


class TestActivation:
    def test_granted_license_is_persisted_and_verified(self, stack):
        outcome = activate(stack)
        assert outcome.granted
        assert outcome.license_path is not None and outcome.license_path.exists()
        assert client.server_key_path(stack["content_id"], stack["home"]).exists()

    def test_denied_outcome_carries_reason(self, stack):
        activate(stack)
        outcome = activate(stack, probe=StaticProbe(MACHINE_BETA))
        assert not outcome.granted
        assert outcome.reason == Reason.WRONG_MACHINE
        assert "different machine" in outcome.describe()

    def test_denial_persists_nothing(self, stack, tmp_path):
        activate(stack)
        home2 = tmp_path / "home2"
        request = client.build_request(
            stack["content_id"].hex, "b@c", probe=StaticProbe(MACHINE_BETA)
        )
        outcome = client.request_activation(stack["endpoint"], request, home=home2)
        assert not outcome.granted
        assert not (home2 / "licenses").exists()

    def test_unreachable_server_is_transport_error(self, stack):
        request = client.build_request(
            stack["content_id"].hex, "a@b", probe=StaticProbe(MACHINE_ALPHA)
        )
        with pytest.raises(TransportError):
            client.request_activation("http://127.0.0.1:9", request, home=stack["home"])

    def test_gate_blocks_transport_during_playback(self, stack):
        gate = NetworkGate()
        with gate.entering(Phase.PLAYBACK):
            with pytest.raises(NetworkBlockedError):
                client._http_json(f"{stack['endpoint']}/v1/server-key", gate)


class _ForgingHandler(BaseHTTPRequestHandler):
    """Answers activation with a license signed by a key it does not publish."""

    content_id: ContentId
    machine_values: dict

    def log_message(self, *args) -> None:
        pass

    def do_POST(self):
        rogue_key = generate_signing_key()
        machine = fingerprint(AttributeSet.from_pairs(self.machine_values))
        forged = issue_license(self.content_id, machine, bytes(32), rogue_key)
        self._reply(
            {
                "granted": True,
                "license": base64.b64encode(forged.to_bytes()).decode(),
            }
        )

    def do_GET(self):
        honest_key = generate_signing_key()
        self._reply(
            {
                "algorithm": "ed25519",
                "public_key": public_key_bytes(honest_key.public_key()).hex(),
            }
        )

    def _reply(self, body: dict) -> None:
        payload = json.dumps(body).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


def test_forged_license_is_rejected_and_not_persisted(tmp_path):
    content_id = ContentId.generate()
    handler = type(
        "BoundForger",
        (_ForgingHandler,),
        {"content_id": content_id, "machine_values": MACHINE_ALPHA},
    )
    httpd = HTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    try:
        endpoint = f"http://127.0.0.1:{httpd.server_address[1]}"
        request = client.build_request(
            content_id.hex, "a@b", probe=StaticProbe(MACHINE_ALPHA)
        )
        home = tmp_path / "home"
        with pytest.raises(ResponseVerificationError):
            client.request_activation(endpoint, request, home=home)
        assert not (home / "licenses").exists()
    finally:
        httpd.shutdown()
        httpd.server_close()
        thread.join(timeout=5)


class TestPlay:
    def test_plays_back_original_bytes(self, stack):
        activate(stack)

        class Collector:
            def __init__(self):
                self.chunks = []
                self.finished = False

            def write(self, chunk):
                self.chunks.append(chunk)

            def finish(self):
                self.finished = True

        sink = Collector()
        session = client.play(
            stack["container_path"],
            home=stack["home"],
            probe=StaticProbe(MACHINE_ALPHA),
            processes=PROCS,
            executor=RecordingExecutor(),
            sink=sink,
        )
        assert b"".join(sink.chunks) == stack["plaintext"]
        assert sink.finished
        assert session.bytes_played == len(stack["plaintext"])
        assert session.crc_ok
        assert session.mode == client.PlaybackMode.IN_MEMORY
        assert session.temp_path is None

    def test_temp_file_mode_cleans_up(self, stack):
        activate(stack)
        session = client.play(
            stack["container_path"],
            home=stack["home"],
            probe=StaticProbe(MACHINE_ALPHA),
            processes=PROCS,
            executor=RecordingExecutor(),
            mode=client.PlaybackMode.TEMP_FILE,
        )
        assert session.bytes_played == len(stack["plaintext"])
        assert session.crc_ok
        assert session.temp_path is not None
        assert session.temp_path.name.startswith("Temp")
        assert not session.temp_path.exists()

    def test_wrong_machine_refused(self, stack):
        activate(stack)
        with pytest.raises(WrongMachineError):
            client.play(
                stack["container_path"],
                home=stack["home"],
                probe=StaticProbe(MACHINE_BETA),
                processes=PROCS,
                executor=RecordingExecutor(),
            )

    def test_drift_within_tolerance_plays(self, stack):
        activate(stack)
        drifted = dict(MACHINE_ALPHA)
        drifted["hostname"] = "renamed-box"
        drifted["mac_address"] = "11:22:33:44:55:66"
        session = client.play(
            stack["container_path"],
            home=stack["home"],
            probe=StaticProbe(drifted),
            processes=PROCS,
            executor=RecordingExecutor(),
        )
        assert session.crc_ok

    def test_live_guard_failure_refuses_playback(self, stack):
        activate(stack)
        executor = RecordingExecutor(fail_pids=[2])
        with pytest.raises(GuardRefusalError):
            client.play(
                stack["container_path"],
                home=stack["home"],
                probe=StaticProbe(MACHINE_ALPHA),
                processes=PROCS,
                executor=executor,
                dry_run=False,
            )

    def test_guard_dry_run_never_refuses(self, stack):
        activate(stack)
        executor = RecordingExecutor(fail_pids=[2])
        session = client.play(
            stack["container_path"],
            home=stack["home"],
            probe=StaticProbe(MACHINE_ALPHA),
            processes=PROCS,
            executor=executor,
        )
        assert executor.calls == []
        assert session.guard_report.dry_run

    def test_tampered_container_refused(self, stack, tmp_path):
        activate(stack)
        blob = bytearray(Path(stack["container_path"]).read_bytes())
        blob[70] ^= 0x40
        bad_path = tmp_path / "tampered.ecakp"
        bad_path.write_bytes(bytes(blob))
        with pytest.raises(TamperedPayloadError):
            client.play(
                bad_path,
                home=stack["home"],
                probe=StaticProbe(MACHINE_ALPHA),
                processes=PROCS,
                executor=RecordingExecutor(),
            )

    def test_missing_server_key_refused(self, stack, tmp_path):
        activate(stack)
        key_path = client.server_key_path(stack["content_id"], stack["home"])
        key_path.unlink()
        with pytest.raises(LicenseVerificationError):
            client.play(
                stack["container_path"],
                home=stack["home"],
                probe=StaticProbe(MACHINE_ALPHA),
                processes=PROCS,
                executor=RecordingExecutor(),
            )

    def test_license_for_other_content_refused(self, stack, tmp_path):
        activate(stack)
        other_id = ContentId.generate()
        other_secret = PackagingSecret.generate()
        other_path = tmp_path / "other.ecakp"
        write_container(pack(b"other", other_id, other_secret), other_path)
        with pytest.raises(InputError):
            client.play(
                other_path,
                license_path=client.default_license_path(
                    stack["content_id"], stack["home"]
                ),
                home=stack["home"],
                probe=StaticProbe(MACHINE_ALPHA),
                processes=PROCS,
                executor=RecordingExecutor(),
            )

    def test_empty_payload_plays_cleanly(self, stack, tmp_path):
        activate(stack)
        # Same id and secret, empty media: the stored license still fits.
        empty_path = tmp_path / "empty.ecakp"
        write_container(pack(b"", stack["content_id"], stack["secret"]), empty_path)
        session = client.play(
            empty_path,
            home=stack["home"],
            probe=StaticProbe(MACHINE_ALPHA),
            processes=PROCS,
            executor=RecordingExecutor(),
        )
        assert session.bytes_played == 0
        assert session.crc_ok
