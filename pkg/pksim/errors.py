"""
Exception hierarchy shared by every pksim module.
Operations that return verdicts (Allow/Deny, Executed/Rejected, ...) do not raise;
the exceptions here cover the error outcomes each operation declares.
"""
from typing import Any, Optional


class PksimError(Exception):
    """Root of all simulator errors."""


# --- Instruction set ---

class DecodeError(PksimError):
    def __init__(self, offset: int, message: str):
        super().__init__(f"offset {offset:#x}: {message}")
        self.offset = offset


class UnknownOpcode(DecodeError):
    def __init__(self, offset: int, opcode: bytes):
        super().__init__(offset, f"unknown opcode {opcode.hex()}")
        self.opcode = opcode


class TruncatedInstruction(DecodeError):
    def __init__(self, offset: int, needed: int, available: int):
        super().__init__(offset, f"instruction needs {needed} bytes, {available} available")
        self.needed = needed
        self.available = available


class UnresolvableBranch(PksimError):
    def __init__(self, offset: Optional[int], detail: str = ""):
        where = f"{offset:#x}" if offset is not None else "<new>"
        super().__init__(f"branch at {where} has no resolvable target {detail}".strip())
        self.offset = offset


# --- Faults raised while stepping a program ---

class MachineFault(PksimError):
    """A fault that stops the stepping of one instruction."""


class DecodeFault(MachineFault):
    def __init__(self, address: int, cause: Exception):
        super().__init__(f"cannot decode at {address:#x}: {cause}")
        self.address = address
        self.cause = cause


class AccessFault(MachineFault):
    def __init__(self, address: int, kind: str, reason: str):
        super().__init__(f"{kind} access to {address:#x} denied ({reason})")
        self.address = address
        self.kind = kind
        self.reason = reason


class PrivilegeTrap(MachineFault):
    def __init__(self, opcode: str, address: Optional[int] = None):
        super().__init__(f"privileged instruction {opcode} trapped")
        self.opcode = opcode
        self.address = address


class MonitorRejected(MachineFault):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"monitor rejected: {reason} {detail}".strip())
        self.reason = reason
        self.detail = detail


# --- MMU ---

class MmuError(PksimError):
    pass


class UnmappedAddress(MmuError):
    def __init__(self, vaddr: int, asid: Optional[int] = None):
        super().__init__(f"address {vaddr:#x} is not mapped" + (f" in ASID {asid}" if asid is not None else ""))
        self.vaddr = vaddr
        self.asid = asid


class NotMonitor(MmuError):
    def __init__(self, actor: Any, operation: str):
        super().__init__(f"{actor} may not perform {operation}: monitor authority required")
        self.actor = actor
        self.operation = operation


class PoolExhausted(MmuError):
    def __init__(self, owner: str, requested: int, free: int):
        super().__init__(f"pool of {owner} has {free} free pages, {requested} requested")
        self.owner = owner
        self.requested = requested
        self.free = free


class UnknownAddressSpace(MmuError):
    pass


class WxViolation(MmuError):
    pass


# --- Monitor and gates ---

class MonitorError(PksimError):
    pass


class UnbalancedExit(MonitorError):
    pass


class InterruptOverflow(MonitorError):
    pass


class SwitchFault(PksimError):
    def __init__(self, reason: str, step: str, detail: str = ""):
        super().__init__(f"switch fault at {step}: {reason} {detail}".strip())
        self.reason = reason
        self.step = step
        self.detail = detail


# --- Policy ---

class PolicyError(PksimError):
    pass


class PolicyLoadError(PolicyError):
    pass


class NoMatchingRule(PolicyError):
    def __init__(self, src: str, tgt: str, privilege_class: Optional[str] = None):
        cls = f" class {privilege_class}" if privilege_class else ""
        super().__init__(f"no transfer rule for {src} -> {tgt}{cls}")
        self.src = src
        self.tgt = tgt
        self.privilege_class = privilege_class


class ObjectTooLarge(PolicyError):
    pass


# --- Deprivileging ---

class RewriteStuck(PksimError):
    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message)
        self.offset = offset


# --- Harness ---

class LoadError(PksimError):
    pass


class ExpectationMismatch(PksimError):
    pass
