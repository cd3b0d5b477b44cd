"""Pure policy decisions: truth tables, absorbing stolen state, parsing."""

from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecakp.errors import InputError
from ecakp.server.policy import (
    Decision,
    LedgerView,
    Outcome,
    PolicyMode,
    ProductStatus,
    Reason,
    decide,
)

FP_A = b"A" * 32
FP_B = b"B" * 32
FP_C = b"C" * 32
FP_D = b"D" * 32


def replay(policy: PolicyMode, fingerprints: list[bytes]) -> list[Decision]:
    """Feed a request sequence through decide, folding state like the server."""
    granted: set[bytes] = set()
    status = ProductStatus.ACTIVE
    decisions = []
    for fp in fingerprints:
        decision = decide(policy, LedgerView(status=status, granted=frozenset(granted)), fp)
        if decision.granted:
            granted.add(fp)
        if decision.mark_stolen:
            status = ProductStatus.STOLEN
        decisions.append(decision)
    return decisions


def outcomes(decisions: list[Decision]) -> list[Outcome]:
    return [d.outcome for d in decisions]


class TestStrict:
    def test_truth_table(self):
        # A, A again, then B: grant, grant, deny wrong_machine.
        decisions = replay(PolicyMode.strict(), [FP_A, FP_A, FP_B])
        assert outcomes(decisions) == [Outcome.GRANTED, Outcome.GRANTED, Outcome.DENIED]
        assert decisions[2].reason == Reason.WRONG_MACHINE

    def test_first_machine_wins_forever(self):
        decisions = replay(PolicyMode.strict(), [FP_A, FP_B, FP_C, FP_A])
        assert [d.granted for d in decisions] == [True, False, False, True]


class TestFairUse:
    def test_truth_table_one_extra(self):
        # A, B, C, A: grant, grant, deny limit_reached, grant.
        decisions = replay(PolicyMode.fair_use(1), [FP_A, FP_B, FP_C, FP_A])
        assert outcomes(decisions) == [
            Outcome.GRANTED,
            Outcome.GRANTED,
            Outcome.DENIED,
            Outcome.GRANTED,
        ]
        assert decisions[2].reason == Reason.LIMIT_REACHED

    def test_zero_extras_behaves_like_strict_quota(self):
        decisions = replay(PolicyMode.fair_use(0), [FP_A, FP_B, FP_A])
        assert [d.granted for d in decisions] == [True, False, True]

    def test_quota_counts_distinct_machines_not_requests(self):
        decisions = replay(PolicyMode.fair_use(1), [FP_A, FP_A, FP_A, FP_B, FP_B])
        assert all(d.granted for d in decisions)


class TestMassiveFraudPrevention:
    def test_truth_table_threshold_three(self):
        # A, B, C fill the threshold; D marks stolen; A is then denied too.
        decisions = replay(
            PolicyMode.massive_fraud_prevention(3), [FP_A, FP_B, FP_C, FP_D, FP_A]
        )
        assert outcomes(decisions) == [
            Outcome.GRANTED,
            Outcome.GRANTED,
            Outcome.GRANTED,
            Outcome.DENIED_STOLEN,
            Outcome.DENIED,
        ]
        assert decisions[3].mark_stolen
        assert decisions[3].reason == Reason.STOLEN
        assert decisions[4].reason == Reason.STOLEN

    def test_reactivation_does_not_cross_threshold(self):
        decisions = replay(
            PolicyMode.massive_fraud_prevention(2), [FP_A, FP_A, FP_A, FP_B, FP_B]
        )
        assert all(d.granted for d in decisions)

    def test_stolen_is_absorbing(self):
        decisions = replay(
            PolicyMode.massive_fraud_prevention(1), [FP_A, FP_B, FP_A, FP_C]
        )
        assert [d.granted for d in decisions] == [True, False, False, False]
        assert all(d.reason == Reason.STOLEN for d in decisions[1:])


class TestMonitorOnly:
    def test_never_blocks(self):
        fingerprints = [bytes([i]) * 32 for i in range(100)]
        decisions = replay(PolicyMode.monitor_only(), fingerprints)
        assert all(d.granted for d in decisions)

    def test_grants_even_with_stolen_status(self):
        view = LedgerView(status=ProductStatus.STOLEN, granted=frozenset())
        assert decide(PolicyMode.monitor_only(), view, FP_A).granted


class TestCrossPolicyInvariants:
    ENFORCING = [
        PolicyMode.strict(),
        PolicyMode.fair_use(1),
        PolicyMode.massive_fraud_prevention(3),
    ]

    @pytest.mark.parametrize("policy", ENFORCING, ids=lambda p: p.spec())
    def test_reactivation_is_always_free(self, policy):
        view = LedgerView(granted=frozenset({FP_A, FP_B, FP_C}))
        assert decide(policy, view, FP_A).granted

    @pytest.mark.parametrize("policy", ENFORCING, ids=lambda p: p.spec())
    def test_stolen_denies_under_every_enforcing_mode(self, policy):
        view = LedgerView(status=ProductStatus.STOLEN, granted=frozenset({FP_A}))
        decision = decide(policy, view, FP_A)
        assert not decision.granted
        assert decision.reason == Reason.STOLEN

    @given(
        granted=st.sets(st.binary(min_size=32, max_size=32), max_size=8),
        fp=st.binary(min_size=32, max_size=32),
    )
    def test_decide_is_pure_and_total(self, granted, fp):
        for policy in self.ENFORCING + [PolicyMode.monitor_only()]:
            view = LedgerView(granted=frozenset(granted))
            first = decide(policy, view, fp)
            assert decide(policy, view, fp) == first
            assert first.granted == (first.reason is None)

    def test_strict_with_multiple_historic_grants_readmits_each(self):
        # History like this only arises after a policy switch.
        view = LedgerView(granted=frozenset({FP_A, FP_B}))
        assert decide(PolicyMode.strict(), view, FP_A).granted
        assert decide(PolicyMode.strict(), view, FP_B).granted
        assert not decide(PolicyMode.strict(), view, FP_C).granted


class TestParsing:
    @pytest.mark.parametrize(
        "text,expected",
        [
            ("monitor", PolicyMode.monitor_only()),
            ("strict", PolicyMode.strict()),
            ("fairuse", PolicyMode.fair_use()),
            ("fairuse:3", PolicyMode.fair_use(3)),
            ("fair_use:0", PolicyMode.fair_use(0)),
            ("fraud", PolicyMode.massive_fraud_prevention()),
            ("fraud:7", PolicyMode.massive_fraud_prevention(7)),
            ("FRAUD:7", PolicyMode.massive_fraud_prevention(7)),
        ],
    )
    def test_accepted_spellings(self, text, expected):
        assert PolicyMode.parse(text) == expected

    @pytest.mark.parametrize(
        "text", ["", "lenient", "fraud:zero", "fraud:0", "fairuse:-1", "strict:2"]
    )
    def test_rejected_spellings(self, text):
        with pytest.raises(InputError):
            PolicyMode.parse(text)

    def test_json_round_trip(self):
        for policy in [
            PolicyMode.monitor_only(),
            PolicyMode.strict(),
            PolicyMode.fair_use(4),
            PolicyMode.massive_fraud_prevention(9),
        ]:
            assert PolicyMode.from_json(policy.to_json()) == policy

    def test_spec_round_trip(self):
        for text in ["monitor", "strict", "fairuse:2", "fraud:5"]:
            assert PolicyMode.parse(text).spec() == text
