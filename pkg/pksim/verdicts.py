"""
Verdict values returned by operations that decide rather than fail:
monitor delegation (Executed/Rejected), transfer handling (Resumed/Denied) and
policy validation (Pass/Fail).
"""
from dataclasses import dataclass
from typing import Any


@dataclass(frozen=True)
class Verdict:
    kind: str
    reason: str = ""
    detail: str = ""
    value: Any = None

    @property
    def ok(self) -> bool:
        return self.kind in ("executed", "resumed", "pass")

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.reason:
            return f"{self.kind}({self.reason})"
        return self.kind


def Executed(value: Any = None, detail: str = "") -> Verdict:
    return Verdict("executed", detail=detail, value=value)


def Rejected(reason: str, detail: str = "") -> Verdict:
    return Verdict("rejected", reason, detail)


def Resumed(detail: str = "") -> Verdict:
    return Verdict("resumed", detail=detail)


def Denied(reason: str, detail: str = "") -> Verdict:
    return Verdict("denied", reason, detail)


def Pass() -> Verdict:
    return Verdict("pass")


def Fail(reason: str, detail: str = "") -> Verdict:
    return Verdict("fail", reason, detail)


# Rejection / denial reasons
UNREGISTERED_PKRS = "UnregisteredPkrs"
FORGED_PGDIR = "ForgedPgdir"
PKS_DISABLE_ATTEMPT = "PksDisableAttempt"
POLICY_VIOLATION = "PolicyViolation"
NOT_JIT_PAGE = "NotJitPage"
NO_TRANSFER_RULE = "NoTransferRule"
RANGE_VIOLATION = "RangeViolation"
TRANSITION_NOT_ALLOWED = "TransitionNotAllowed"
DUPLICATE_GATE = "DuplicateGate"
MALFORMED_METADATA = "MalformedMetadata"
