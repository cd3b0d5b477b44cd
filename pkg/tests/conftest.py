"""Shared fixtures: a fixed machine, a packed product and a service."""

from __future__ import annotations

import os

import pytest

from ecakp.container import ContentId, PackagingSecret, pack
from ecakp.crypto import generate_signing_key
from ecakp.identity import AttributeSet, StaticProbe, fingerprint
from ecakp.server.ledger import ActivationLedger
from ecakp.server.policy import PolicyMode
from ecakp.server.service import ActivationService

# One concrete machine, used wherever a test needs stable identity values.
MACHINE_ALPHA = {
    "cpu_model": "Acme Hexa 3.2GHz",
    "board_serial": "BRD-0042-X",
    "disk_serial": "WD-55AA7700",
    "mac_address": "00:1A:2B:3C:4D:5E",
    "os_family": "Linux",
    "hostname": "lab-mach-01",
}

MACHINE_BETA = {
    "cpu_model": "Acme Octa 4.0GHz",
    "board_serial": "BRD-7777-Q",
    "disk_serial": "SG-11BB2200",
    "mac_address": "66:77:88:99:AA:BB",
    "os_family": "Linux",
    "hostname": "lab-mach-02",
}


def machine_values(index: int) -> dict[str, str]:
    """Distinct, deterministic machine attributes for population tests."""
    return {
        "cpu_model": f"cpu-{index}",
        "board_serial": f"board-{index}",
        "disk_serial": f"disk-{index}",
        "mac_address": f"02:00:00:00:{index >> 8 & 0xFF:02x}:{index & 0xFF:02x}",
        "os_family": "linux",
        "hostname": f"host-{index}",
    }


@pytest.fixture
def alpha_attrs() -> AttributeSet:
    return AttributeSet.from_pairs(MACHINE_ALPHA)


@pytest.fixture
def alpha_probe() -> StaticProbe:
    return StaticProbe(MACHINE_ALPHA)


@pytest.fixture
def beta_probe() -> StaticProbe:
    return StaticProbe(MACHINE_BETA)


@pytest.fixture
def alpha_machine(alpha_attrs):
    return fingerprint(alpha_attrs)


@pytest.fixture
def product():
    """(content id, packaging secret, plaintext, container) for one release."""
    content_id = ContentId.generate()
    secret = PackagingSecret.generate()
    plaintext = os.urandom(4096) + b"stable tail" * 32
    return content_id, secret, plaintext, pack(plaintext, content_id, secret)


@pytest.fixture
def signing_key():
    return generate_signing_key()


@pytest.fixture
def ledger(tmp_path) -> ActivationLedger:
    led = ActivationLedger(tmp_path / "ledger")
    yield led
    led.close()


@pytest.fixture
def service(ledger, signing_key) -> ActivationService:
    return ActivationService(ledger, signing_key)


def register_product(ledger, content_id, secret, policy=None) -> None:
    ledger.register(
        content_id,
        secret.master_key(content_id),
        policy if policy is not None else PolicyMode.strict(),
    )
