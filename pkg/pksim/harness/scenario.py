"""
Scenario files: a policy, initial memory contents, extra gate registrations and a
script of actions, each with an optional expected verdict.

Everything a scenario names (compartments, gates, shared objects, steps, registers)
is resolved when it is loaded, so a scenario that loads runs to completion.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Set, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config import config
from pksim.errors import LoadError, PolicyError
from pksim.isa.instr import REG64
from pksim.logger import setup_logger
from pksim.mmu import EXECUTE, READ, WRITE
from pksim.monitor import OP_KINDS
from pksim.policy.loader import compile_policy, load_policy
from pksim.policy.model import CompiledPolicy, GateSpec, PolicyDocument
from pksim.sgt import START_STEPS, STEPS

logger = setup_logger()

ACTIONS = ("become", "run_program", "call_gate", "return_gate", "interrupt", "adversarial_start",
           "access", "monitor_call", "register_gate", "jit_update", "alloc_heap", "spawn",
           "context_switch")
REGIONS = ("code", "data", "stack", "heap", "jit")


class Target(BaseModel):
    """One address, named by what lives there. Exactly one selector must be set."""
    model_config = ConfigDict(extra="forbid")

    compartment: Optional[str] = Field(None, description="Compartment whose region is meant")
    region: Literal["code", "data", "stack", "heap", "jit"] = Field("data", description="Region of the compartment")
    index: int = Field(0, ge=0, description="Heap or JIT page index")
    object: Optional[str] = Field(None, description="Shared object name")
    page_table: Optional[int] = Field(None, ge=0, description="N-th page-table frame in the page-table map")
    save_area: Optional[int] = Field(None, ge=0, description="Thread id whose monitor save page is meant")
    gate_table: bool = Field(False, description="The first switch-gate table page")
    address: Optional[int] = Field(None, ge=0, description="Raw virtual address")
    offset: int = Field(0, ge=0, lt=config.machine.page_size, description="Byte offset added to the address")

    @model_validator(mode="after")
    def _one_selector(self) -> "Target":
        chosen = [self.compartment is not None, self.object is not None, self.page_table is not None,
                  self.save_area is not None, self.gate_table, self.address is not None]
        if sum(chosen) != 1:
            raise ValueError("a target names exactly one of compartment, object, page_table, "
                             "save_area, gate_table or address")
        return self


class MemoryInit(BaseModel):
    target: Target
    data: str = Field(..., description="Hex bytes written by the loader before the script runs")


class Action(BaseModel):
    model_config = ConfigDict(extra="forbid")

    action: str = Field(..., description=f"One of: {', '.join(ACTIONS)}")
    compartment: Optional[str] = Field(None, description="Compartment the action runs in or concerns")
    gate: Optional[str] = Field(None, description="Gate name")
    code: Optional[str] = Field(None, description="Program bytes as hex")
    offset: int = Field(0, ge=0, description="Code offset for run_program and jit_update")
    rewrite: bool = Field(False, description="Deprivilege the program before run_program runs it")
    interrupt_before: Optional[str] = Field(None, description="Micro-step before which an interrupt arrives")
    probe: Optional[str] = Field(None, description="Compartment whose data the interrupt handler tries to read")
    start_step: Optional[str] = Field(None, description="Adversarial entry step")
    registers: Dict[str, int] = Field(default_factory=dict, description="Forged register values by name")
    kind: Optional[Literal["read", "write", "execute"]] = Field(None, description="Access kind")
    target: Optional[Target] = None
    data: Optional[str] = Field(None, description="Hex bytes to write")
    op: Optional[str] = Field(None, description="Privileged operation kind for monitor_call")
    args: Dict[str, Union[int, str, bool]] = Field(default_factory=dict, description="Operation arguments")
    spec: Optional[GateSpec] = Field(None, description="Gate to register")
    requester: str = Field("core", description="Compartment asking for a gate registration")
    pages: int = Field(1, ge=1, description="Pages for alloc_heap")
    index: int = Field(0, ge=0, description="JIT page index")
    tid: Optional[int] = Field(None, ge=0, description="Thread for context_switch")
    expect: Optional[str] = Field(None, description="Expected verdict, e.g. 'deny(AD)' or 'executed'")

    @model_validator(mode="after")
    def _fields_for_action(self) -> "Action":
        need = {
            "become": ("compartment",),
            "run_program": ("compartment", "code"),
            "call_gate": ("gate",),
            "return_gate": ("gate",),
            "adversarial_start": ("start_step",),
            "access": ("kind", "target"),
            "monitor_call": ("op",),
            "register_gate": ("spec",),
            "jit_update": ("compartment", "data"),
            "alloc_heap": ("compartment",),
            "spawn": ("compartment",),
            "context_switch": ("tid",),
        }
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action '{self.action}'")
        missing = [name for name in need.get(self.action, ()) if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.action} needs {', '.join(missing)}")
        for text in (self.code, self.data):
            if text is not None:
                bytes.fromhex(text)
        return self


class Scenario(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    name: str = Field("scenario", description="Scenario name, used for the report directory")
    seed: int = Field(config.harness.default_seed, description="Seed recorded in the report")
    policy: Optional[str] = Field(None, description="Policy file, relative to the scenario file")
    policy_document: Optional[PolicyDocument] = Field(None, alias="policy-document",
                                                      description="Inline policy")
    memory: List[MemoryInit] = Field(default_factory=list)
    gates: List[GateSpec] = Field(default_factory=list, description="Gates registered before the script runs")
    script: List[Action] = Field(default_factory=list)

    @model_validator(mode="after")
    def _one_policy(self) -> "Scenario":
        if self.policy is not None and self.policy_document is not None:
            raise ValueError("give either a policy file or an inline policy, not both")
        return self


@dataclass
class LoadedScenario:
    scenario: Scenario
    policy: CompiledPolicy
    source: Optional[Path] = None

    @property
    def name(self) -> str:
        return self.scenario.name


# --- Resolution ---

def _resolve(scenario: Scenario, policy: CompiledPolicy) -> None:
    compartments = set(policy.compartments)
    objects = {o.name for o in policy.shared_objects}
    gates: Set[str] = {g.name for g in policy.gates}
    threads = {0}

    def compartment(name: Optional[str], where: str) -> None:
        if name is not None and name not in compartments:
            raise LoadError(f"{where}: unknown compartment '{name}'")

    def target(t: Optional[Target], where: str) -> None:
        if t is None:
            return
        compartment(t.compartment, where)
        if t.object is not None and t.object not in objects:
            raise LoadError(f"{where}: unknown shared object '{t.object}'")
        if t.save_area is not None and t.save_area not in threads:
            raise LoadError(f"{where}: no thread {t.save_area}")
        if t.compartment is not None:
            plan = policy.compartments[t.compartment]
            if t.region == "jit" and t.index >= plan.jit_pages:
                raise LoadError(f"{where}: {t.compartment} has {plan.jit_pages} JIT pages")
            if t.region == "heap" and plan.kind != "module":
                raise LoadError(f"{where}: {t.compartment} has no heap")

    for i, init in enumerate(scenario.memory):
        target(init.target, f"memory[{i}]")
    for spec in scenario.gates:
        compartment(spec.src, f"gate {spec.name}")
        compartment(spec.tgt, f"gate {spec.name}")
        if spec.name in gates:
            raise LoadError(f"gate {spec.name} is defined twice")
        gates.add(spec.name)

    for i, action in enumerate(scenario.script):
        where = f"script[{i}] {action.action}"
        compartment(action.compartment, where)
        compartment(action.probe, where)
        target(action.target, where)
        if action.gate is not None and action.gate not in gates:
            raise LoadError(f"{where}: unknown gate '{action.gate}'")
        if action.interrupt_before is not None and action.interrupt_before not in STEPS:
            raise LoadError(f"{where}: no micro-step '{action.interrupt_before}'")
        if action.start_step is not None and action.start_step not in START_STEPS:
            raise LoadError(f"{where}: cannot start at '{action.start_step}'")
        for reg in action.registers:
            if reg not in REG64:
                raise LoadError(f"{where}: unknown register '{reg}'")
        for value in action.args.values():
            if isinstance(value, str) and value.startswith("pkrs:"):
                compartment(value[len("pkrs:"):], where)
            if isinstance(value, str) and value.startswith("gate:") and value[len("gate:"):] not in gates:
                raise LoadError(f"{where}: unknown gate in argument '{value}'")
        if action.op is not None and action.op not in OP_KINDS:
            raise LoadError(f"{where}: unknown privileged operation '{action.op}'")
        if action.kind is not None and action.kind not in (READ, WRITE, EXECUTE):
            raise LoadError(f"{where}: unknown access kind '{action.kind}'")
        if action.action == "jit_update":
            plan = policy.compartments[action.compartment]
            if action.index >= plan.jit_pages:
                raise LoadError(f"{where}: {action.compartment} has {plan.jit_pages} JIT pages")
        if action.action == "register_gate":
            compartment(action.spec.src, where)
            compartment(action.spec.tgt, where)
            compartment(action.requester, where)
            # Later actions may use the gate; a rejected registration shows up as an unknown gate fault
            gates.add(action.spec.name)
        if action.action == "spawn":
            threads.add(max(threads) + 1)
        if action.action == "context_switch" and action.tid not in threads:
            raise LoadError(f"{where}: no thread {action.tid}")


# --- Loading ---

def parse_scenario(data: Union[dict, str], base_dir: Optional[Path] = None) -> LoadedScenario:
    try:
        if isinstance(data, str):
            scenario = Scenario.model_validate_json(data)
        else:
            scenario = Scenario.model_validate(data)
    except ValidationError as e:
        raise LoadError(f"invalid scenario: {e}") from e

    try:
        if scenario.policy is not None:
            doc = load_policy(Path(base_dir or ".") / scenario.policy)
        else:
            doc = scenario.policy_document or PolicyDocument(name=scenario.name)
        policy = compile_policy(doc)
    except PolicyError as e:
        raise LoadError(f"scenario {scenario.name}: {e}") from e

    _resolve(scenario, policy)
    return LoadedScenario(scenario, policy)


def load_scenario(path: Path) -> LoadedScenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise LoadError(f"cannot read scenario {path}: {e}") from e
    logger.info(f"Loading scenario: {path}")
    loaded = parse_scenario(text, path.parent)
    loaded.source = path
    return loaded
