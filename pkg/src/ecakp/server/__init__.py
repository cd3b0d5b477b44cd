"""Activation server: policy engine, persistent ledger, service and HTTP API."""

from .ledger import ActivationLedger, ActivationRecord, LedgerStats
from .policy import Decision, LedgerView, Outcome, PolicyMode, ProductStatus, Reason, decide
from .service import ActivationRequest, ActivationResponse, ActivationService

__all__ = [
    "ActivationLedger",
    "ActivationRecord",
    "ActivationRequest",
    "ActivationResponse",
    "ActivationService",
    "Decision",
    "LedgerStats",
    "LedgerView",
    "Outcome",
    "PolicyMode",
    "ProductStatus",
    "Reason",
    "decide",
]
