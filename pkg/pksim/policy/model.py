"""
Policy documents (validated with pydantic) and the compiled policy the monitor,
the gate table and the harness work from.
"""
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import config
from pksim.policy.partition import PartitionResult
from pksim.policy.privilege_classes import PageLayout, SharedObject
from pksim.policy.transfer import RuleSet, check_ranges

CORE = "core"
MONITOR = "monitor"
RESERVED = (CORE, MONITOR)


# --- Documents ---

class CompartmentSpec(BaseModel):
    name: str = Field(..., description="Compartment (module) name")
    heap_pages: int = Field(config.machine.heap_pool_pages, ge=0, description="Pages reserved for the private heap pool")
    jit_pages: int = Field(0, ge=0, description="Code pages the monitor may update at run time")
    code: str = Field("c3", description="Module code as hex bytes, loaded at the start of its code page")

    @field_validator("name")
    @classmethod
    def _not_reserved(cls, v: str) -> str:
        if v in RESERVED:
            raise ValueError(f"'{v}' is reserved")
        if not v or any(c.isspace() for c in v):
            raise ValueError("compartment names must be non-empty and contain no whitespace")
        return v

    @field_validator("code")
    @classmethod
    def _hex(cls, v: str) -> str:
        bytes.fromhex(v)
        return v


class AddressSpaceSpec(BaseModel):
    asid: int = Field(..., ge=1, lt=4096, description="ASID of the space")
    compartments: List[str] = Field(default_factory=list, description="Module compartments resident in the space")

    @field_validator("compartments")
    @classmethod
    def _capacity(cls, v: List[str]) -> List[str]:
        if len(v) > config.partition.capacity:
            raise ValueError(f"{len(v)} compartments exceed the {config.partition.capacity} module pkeys of a space")
        return v


class GateSpec(BaseModel):
    name: str = Field(..., description="Symbolic gate name used by scenarios")
    src: str = Field(..., description="Calling compartment")
    tgt: str = Field(..., description="Called compartment")
    gate_id: Optional[int] = Field(None, ge=0, description="Even call-gate id; the return gate is gate_id + 1")
    entry_offset: int = Field(0, ge=0, description="Entry point offset inside the target's code page")
    return_offset: int = Field(0, ge=0, description="Return point offset inside the source's code page")
    stack_switch: bool = Field(True, description="Switch to the target's private stack")


class FieldCheckSpec(BaseModel):
    name: str = Field("", description="Field name shown in verdicts")
    offset: int = Field(..., ge=0, lt=config.machine.page_size)
    width: int = Field(4, description="Field width in bytes (little-endian, unsigned)")
    ranges: List[Tuple[int, int]] = Field(..., description="Inclusive legal ranges, sorted and disjoint")

    @field_validator("ranges")
    @classmethod
    def _ranges(cls, v: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
        return check_ranges(v)

    @model_validator(mode="after")
    def _fits(self) -> "FieldCheckSpec":
        if self.width not in (1, 2, 4, 8):
            raise ValueError("width must be 1, 2, 4 or 8")
        if self.offset + self.width > config.machine.page_size:
            raise ValueError("field crosses the end of the page")
        return self


class TransferRuleSpec(BaseModel):
    src: str
    tgt: str
    privilege_class: Optional[str] = Field(None, description="Defaults to the class of the (src, tgt) pair")
    fields: List[FieldCheckSpec] = Field(default_factory=list)


class SharedObjectSpec(BaseModel):
    name: str
    src: str
    tgt: str
    size: int = Field(..., gt=0)


class PolicyDocument(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    name: str = Field("policy", description="Policy name")
    compartments: List[CompartmentSpec] = Field(default_factory=list)
    address_spaces: List[AddressSpaceSpec] = Field(default_factory=list, alias="address-spaces")
    dependencies: List[Tuple[str, str]] = Field(default_factory=list, description="Module dependency edges (a depends on b)")
    transitions: List[Tuple[str, str]] = Field(default_factory=list, description="Allowed directed call transitions")
    gates: List[GateSpec] = Field(default_factory=list)
    transfer_rules: List[TransferRuleSpec] = Field(default_factory=list, alias="transfer-rules")
    privilege_classes: List[SharedObjectSpec] = Field(default_factory=list, alias="privilege-classes")

    @model_validator(mode="after")
    def _references(self) -> "PolicyDocument":
        names = [c.name for c in self.compartments]
        if len(set(names)) != len(names):
            raise ValueError("duplicate compartment names")
        known = set(names) | set(RESERVED)

        def need(name: str, where: str):
            if name not in known:
                raise ValueError(f"{where} references unknown compartment '{name}'")

        for a, b in self.dependencies:
            need(a, "dependencies")
            need(b, "dependencies")
        for a, b in self.transitions:
            need(a, "transitions")
            need(b, "transitions")
        for g in self.gates:
            need(g.src, f"gate {g.name}")
            need(g.tgt, f"gate {g.name}")
        for r in self.transfer_rules:
            need(r.src, "transfer rule")
            need(r.tgt, "transfer rule")
        for o in self.privilege_classes:
            need(o.src, f"shared object {o.name}")
            need(o.tgt, f"shared object {o.name}")
        gate_names = [g.name for g in self.gates]
        if len(set(gate_names)) != len(gate_names):
            raise ValueError("duplicate gate names")
        placed = [m for s in self.address_spaces for m in s.compartments]
        for m in placed:
            need(m, "address-spaces")
        if len(set(placed)) != len(placed):
            raise ValueError("a compartment is placed in two address spaces")
        asids = [s.asid for s in self.address_spaces]
        if len(set(asids)) != len(asids):
            raise ValueError("duplicate ASIDs")
        return self


# --- Compiled form ---

@dataclass
class CompartmentPlan:
    name: str
    kind: str
    pkey: int
    # None for compartments living in the shared part (core kernel, monitor)
    asid: Optional[int]
    heap_pages: int = 0
    jit_pages: int = 0
    code: bytes = b"\xc3"


@dataclass
class CompiledPolicy:
    name: str
    compartments: Dict[str, CompartmentPlan]
    spaces: Dict[int, List[str]]
    transitions: Set[Tuple[str, str]]
    gates: List[GateSpec]
    rules: RuleSet
    shared_objects: List[SharedObject]
    layout: PageLayout
    partition: Optional[PartitionResult] = None
    # privilege class -> asid of the pages hosting it
    class_space: Dict[str, int] = field(default_factory=dict)

    def allows(self, src: str, tgt: str) -> bool:
        """Transitions with the core kernel and the monitor are implicit."""
        if src == tgt:
            return False
        if CORE in (src, tgt) or MONITOR in (src, tgt):
            return True
        return (src, tgt) in self.transitions

    def modules(self) -> List[str]:
        return sorted(n for n, c in self.compartments.items() if c.kind == "module")

    def gate(self, name: str) -> GateSpec:
        for g in self.gates:
            if g.name == name:
                return g
        raise KeyError(name)

    def dump(self) -> str:
        """Canonical text of the compiled policy; identical inputs give identical bytes."""
        data = {
            "name": self.name,
            "compartments": {n: {"kind": c.kind, "pkey": c.pkey, "asid": c.asid,
                                 "heap_pages": c.heap_pages, "jit_pages": c.jit_pages}
                             for n, c in sorted(self.compartments.items())},
            "address_spaces": {str(a): sorted(m) for a, m in sorted(self.spaces.items())},
            "transitions": sorted(list(t) for t in self.transitions),
            "gates": [g.model_dump() for g in sorted(self.gates, key=lambda g: g.name)],
            "transfer_rules": [
                {"src": r.src, "tgt": r.tgt, "class": r.privilege_class,
                 "fields": [{"name": f.name, "offset": f.offset, "width": f.width,
                             "ranges": [list(x) for x in f.ranges]} for f in r.fields]}
                for r in sorted(self.rules.rules, key=lambda r: (r.src, r.tgt, r.privilege_class))],
            "class_pages": [{"class": p.privilege_class, "objects": [list(o) for o in p.objects]}
                            for p in self.layout.pages],
            "crossings": self.partition.crossings if self.partition else None,
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"
