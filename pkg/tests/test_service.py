"""Activation service: validation, recording, issuance and concurrency."""

from __future__ import annotations

import threading

import pytest

from ecakp.container import ContentId
from ecakp.errors import ProtocolError
from ecakp.identity import AttributeSet, fingerprint
from ecakp.licensing import unwrap_content_key, verify_license
from ecakp.server.ledger import ActivationLedger
from ecakp.server.policy import Outcome, PolicyMode, Reason
from ecakp.server.service import (
    ActivationRequest,
    ActivationService,
    validate_email,
)

from conftest import MACHINE_ALPHA, machine_values

CID = ContentId(bytes(range(16)))
MASTER_KEY = bytes(range(64, 96))


def request_for(values: dict[str, str], content_id: ContentId = CID) -> ActivationRequest:
    machine = fingerprint(AttributeSet.from_pairs(values))
    return ActivationRequest(
        content_id=content_id,
        fingerprint_digest=machine.digest,
        attribute_digests=machine.attribute_digests,
        email="buyer@example.com",
    )


@pytest.fixture
def strict_service(tmp_path, signing_key) -> ActivationService:
    ledger = ActivationLedger(tmp_path / "ledger")
    ledger.register(CID, MASTER_KEY, PolicyMode.strict())
    yield ActivationService(ledger, signing_key)
    ledger.close()


class TestEmailValidation:
    @pytest.mark.parametrize(
        "email", ["a@b", "buyer@example.com", "first.last@sub.domain.org"]
    )
    def test_accepts(self, email):
        validate_email(email)

    @pytest.mark.parametrize(
        "email", ["", "nobody", "@domain", "local@", "two@@ats", "a@b@c"]
    )
    def test_rejects(self, email):
        with pytest.raises(ProtocolError):
            validate_email(email)

    def test_request_construction_validates(self):
        machine = fingerprint(AttributeSet.from_pairs(MACHINE_ALPHA))
        with pytest.raises(ProtocolError):
            ActivationRequest(
                content_id=CID,
                fingerprint_digest=machine.digest,
                attribute_digests=machine.attribute_digests,
                email="not-an-address",
            )

    def test_request_rejects_short_digest(self):
        with pytest.raises(ProtocolError):
            ActivationRequest(
                content_id=CID,
                fingerprint_digest=b"short",
                attribute_digests=(),
                email="a@b",
            )


class TestActivate:
    def test_grant_issues_verifiable_license(self, strict_service, signing_key):
        response = strict_service.activate(request_for(MACHINE_ALPHA))
        assert response.granted
        assert response.reason is None
        assert verify_license(response.license, signing_key.public_key())
        key = unwrap_content_key(
            response.license, AttributeSet.from_pairs(MACHINE_ALPHA)
        )
        assert key == MASTER_KEY

    def test_every_outcome_is_recorded(self, strict_service):
        strict_service.activate(request_for(MACHINE_ALPHA))
        strict_service.activate(request_for(machine_values(2)))
        records = list(strict_service.ledger.records(CID))
        assert [r.outcome for r in records] == [Outcome.GRANTED, Outcome.DENIED]
        assert records[0].email == "buyer@example.com"

    def test_reactivation_is_granted_again(self, strict_service):
        first = strict_service.activate(request_for(MACHINE_ALPHA))
        second = strict_service.activate(request_for(MACHINE_ALPHA))
        assert first.granted and second.granted
        assert strict_service.ledger.stats(CID).distinct_machines == 1

    def test_unknown_content_denied_and_recorded(self, strict_service):
        ghost = ContentId(bytes(range(100, 116)))
        response = strict_service.activate(request_for(MACHINE_ALPHA, content_id=ghost))
        assert not response.granted
        assert response.reason == Reason.UNKNOWN_CONTENT
        assert len(list(strict_service.ledger.records(ghost))) == 1

    def test_denial_carries_no_license(self, strict_service):
        strict_service.activate(request_for(MACHINE_ALPHA))
        denied = strict_service.activate(request_for(machine_values(7)))
        assert denied.license is None
        assert denied.reason == Reason.WRONG_MACHINE

    def test_policy_switch_applies_to_next_request(self, strict_service):
        strict_service.activate(request_for(MACHINE_ALPHA))
        denied = strict_service.activate(request_for(machine_values(1)))
        assert not denied.granted
        strict_service.ledger.set_policy(CID, PolicyMode.monitor_only())
        granted = strict_service.activate(request_for(machine_values(1)))
        assert granted.granted

    def test_concurrent_strict_requests_grant_exactly_once(self, tmp_path, signing_key):
        ledger = ActivationLedger(tmp_path / "conc")
        ledger.register(CID, MASTER_KEY, PolicyMode.strict())
        service = ActivationService(ledger, signing_key)
        requests = [request_for(machine_values(i)) for i in range(10)]
        responses: list = [None] * len(requests)
        barrier = threading.Barrier(len(requests))

        def run(index: int) -> None:
            barrier.wait()
            responses[index] = service.activate(requests[index])

        threads = [threading.Thread(target=run, args=(i,)) for i in range(len(requests))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

        assert sum(1 for r in responses if r.granted) == 1
        stats = ledger.stats(CID)
        assert stats.grants == 1
        assert stats.denials == 9
        ledger.close()
