"""Per-copy activation policies and the pure decision function.

Four modes, ordered roughly by strictness:

* monitor_only records every request and never blocks.
* massive_fraud_prevention allows up to a threshold of distinct machines;
  crossing it marks the copy stolen, which denies every later request.
* fair_use allows the first machine plus a configured number of extras.
* strict locks the copy to the first machine that activates.

Every enforcing mode treats re-activation from an already-granted
fingerprint as free, so reinstalling on the same machine never consumes
quota. The decision function is pure: it maps (policy, history view,
fingerprint) to a decision and leaves recording to the caller.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Final

from ..errors import InputError

DEFAULT_FRAUD_THRESHOLD: Final = 5
DEFAULT_EXTRA_ACTIVATIONS: Final = 1


class PolicyKind(str, enum.Enum):
    MONITOR_ONLY = "monitor_only"
    MASSIVE_FRAUD_PREVENTION = "massive_fraud_prevention"
    FAIR_USE = "fair_use"
    STRICT = "strict"


class Outcome(str, enum.Enum):
    GRANTED = "granted"
    DENIED = "denied"
    # Denial that also marks the copy stolen from this request onward.
    DENIED_STOLEN = "denied_stolen"


class Reason(str, enum.Enum):
    LIMIT_REACHED = "limit_reached"
    STOLEN = "stolen"
    UNKNOWN_CONTENT = "unknown_content"
    WRONG_MACHINE = "wrong_machine"


class ProductStatus(str, enum.Enum):
    ACTIVE = "active"
    STOLEN = "stolen"


@dataclass(frozen=True)
class PolicyMode:
    """One policy choice with its parameters.

    threshold applies to massive_fraud_prevention; extra_activations to
    fair_use. Irrelevant parameters keep their defaults and are ignored.
    """

    kind: PolicyKind
    threshold: int = DEFAULT_FRAUD_THRESHOLD
    extra_activations: int = DEFAULT_EXTRA_ACTIVATIONS

    def __post_init__(self) -> None:
        if self.kind == PolicyKind.MASSIVE_FRAUD_PREVENTION and self.threshold < 1:
            raise ValueError("fraud threshold must be at least 1")
        if self.kind == PolicyKind.FAIR_USE and self.extra_activations < 0:
            raise ValueError("extra activations must be non-negative")

    @classmethod
    def monitor_only(cls) -> "PolicyMode":
        return cls(PolicyKind.MONITOR_ONLY)

    @classmethod
    def massive_fraud_prevention(cls, threshold: int = DEFAULT_FRAUD_THRESHOLD) -> "PolicyMode":
        return cls(PolicyKind.MASSIVE_FRAUD_PREVENTION, threshold=threshold)

    @classmethod
    def fair_use(cls, extra_activations: int = DEFAULT_EXTRA_ACTIVATIONS) -> "PolicyMode":
        return cls(PolicyKind.FAIR_USE, extra_activations=extra_activations)

    @classmethod
    def strict(cls) -> "PolicyMode":
        return cls(PolicyKind.STRICT)

    @classmethod
    def parse(cls, text: str) -> "PolicyMode":
        """Parse CLI/config spellings: monitor, strict, fairuse[:E], fraud[:T].

        Raises:
            InputError: unknown name or malformed parameter.
        """
        name, sep, param = text.strip().lower().partition(":")
        try:
            value = int(param) if sep else None
        except ValueError:
            raise InputError(f"policy parameter must be an integer: {text!r}") from None
        try:
            if name in ("monitor", "monitor_only"):
                if value is not None:
                    raise ValueError
                return cls.monitor_only()
            if name == "strict":
                if value is not None:
                    raise ValueError
                return cls.strict()
            if name in ("fairuse", "fair_use"):
                return cls.fair_use() if value is None else cls.fair_use(value)
            if name in ("fraud", "massive_fraud_prevention"):
                return (
                    cls.massive_fraud_prevention()
                    if value is None
                    else cls.massive_fraud_prevention(value)
                )
        except ValueError:
            raise InputError(f"invalid policy parameter: {text!r}") from None
        raise InputError(
            f"unknown policy {text!r}; expected monitor, strict, fairuse[:E] or fraud[:T]"
        )

    def spec(self) -> str:
        if self.kind == PolicyKind.MASSIVE_FRAUD_PREVENTION:
            return f"fraud:{self.threshold}"
        if self.kind == PolicyKind.FAIR_USE:
            return f"fairuse:{self.extra_activations}"
        return "monitor" if self.kind == PolicyKind.MONITOR_ONLY else "strict"

    def to_json(self) -> dict:
        body: dict = {"kind": self.kind.value}
        if self.kind == PolicyKind.MASSIVE_FRAUD_PREVENTION:
            body["threshold"] = self.threshold
        if self.kind == PolicyKind.FAIR_USE:
            body["extra_activations"] = self.extra_activations
        return body

    @classmethod
    def from_json(cls, body: dict) -> "PolicyMode":
        try:
            kind = PolicyKind(body["kind"])
        except (KeyError, TypeError, ValueError):
            raise InputError(f"unknown policy kind in {body!r}") from None
        try:
            if kind == PolicyKind.MASSIVE_FRAUD_PREVENTION:
                return cls.massive_fraud_prevention(int(body.get("threshold", DEFAULT_FRAUD_THRESHOLD)))
            if kind == PolicyKind.FAIR_USE:
                return cls.fair_use(int(body.get("extra_activations", DEFAULT_EXTRA_ACTIVATIONS)))
        except (TypeError, ValueError):
            raise InputError(f"invalid policy parameter in {body!r}") from None
        return cls(kind)


@dataclass(frozen=True)
class LedgerView:
    """What the decision function may see of one copy's history."""

    status: ProductStatus = ProductStatus.ACTIVE
    granted: frozenset[bytes] = field(default_factory=frozenset)

    @property
    def distinct_machines(self) -> int:
        return len(self.granted)


@dataclass(frozen=True)
class Decision:
    outcome: Outcome
    reason: Reason | None = None
    # Set only on the request that crosses the fraud threshold.
    mark_stolen: bool = False

    @property
    def granted(self) -> bool:
        return self.outcome == Outcome.GRANTED


_GRANT: Final = Decision(Outcome.GRANTED)


def decide(policy: PolicyMode, view: LedgerView, fingerprint_digest: bytes) -> Decision:
    """Pure policy decision for one activation request.

    Properties the implementation preserves: a fingerprint that was ever
    granted stays granted under every mode unless the copy is stolen;
    stolen is absorbing for every enforcing mode; monitor_only never
    denies.
    """
    if policy.kind == PolicyKind.MONITOR_ONLY:
        return _GRANT
    if view.status == ProductStatus.STOLEN:
        return Decision(Outcome.DENIED, Reason.STOLEN)
    if fingerprint_digest in view.granted:
        return _GRANT

    if policy.kind == PolicyKind.MASSIVE_FRAUD_PREVENTION:
        if view.distinct_machines < policy.threshold:
            return _GRANT
        return Decision(Outcome.DENIED_STOLEN, Reason.STOLEN, mark_stolen=True)
    if policy.kind == PolicyKind.FAIR_USE:
        if view.distinct_machines < 1 + policy.extra_activations:
            return _GRANT
        return Decision(Outcome.DENIED, Reason.LIMIT_REACHED)
    if policy.kind == PolicyKind.STRICT:
        if not view.granted:
            return _GRANT
        return Decision(Outcome.DENIED, Reason.WRONG_MACHINE)
    raise ValueError(f"unhandled policy kind {policy.kind!r}")
