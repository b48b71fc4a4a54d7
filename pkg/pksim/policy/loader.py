"""
Loading policy files and compiling them into a CompiledPolicy.
"""
import json
from pathlib import Path
from typing import Dict, List, Union

from pydantic import ValidationError

from config import config
from pksim.errors import PolicyError, PolicyLoadError
from pksim.logger import setup_logger
from pksim.policy.graph import DependencyGraph
from pksim.policy.model import CORE, MONITOR, CompartmentPlan, CompiledPolicy, PolicyDocument
from pksim.policy.partition import partition
from pksim.policy.privilege_classes import SharedObject, assign_privilege_classes
from pksim.policy.transfer import FieldCheck, RuleSet, TransferRule, class_id

logger = setup_logger()


def parse_policy(data: Union[dict, str]) -> PolicyDocument:
    try:
        if isinstance(data, str):
            return PolicyDocument.model_validate_json(data)
        return PolicyDocument.model_validate(data)
    except ValidationError as e:
        raise PolicyLoadError(f"invalid policy: {e}") from e


def load_policy(path: Path) -> PolicyDocument:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise PolicyLoadError(f"cannot read policy {path}: {e}") from e
    logger.info(f"Loading policy: {path}")
    return parse_policy(text)


def compile_policy(doc: PolicyDocument) -> CompiledPolicy:
    """Resolves address spaces and pkeys, rules and the shared-page layout."""
    modules = sorted(c.name for c in doc.compartments)
    specs = {c.name: c for c in doc.compartments}

    part = None
    if doc.address_spaces:
        spaces: Dict[int, List[str]] = {s.asid: sorted(s.compartments) for s in doc.address_spaces}
        placed = {m for members in spaces.values() for m in members}
        missing = sorted(set(modules) - placed)
        if missing:
            raise PolicyError(f"compartments without an address space: {', '.join(missing)}")
    else:
        edges = doc.dependencies or [(a, b) for a, b in doc.transitions if a in specs and b in specs]
        graph = DependencyGraph(modules, [(a, b) for a, b in edges if a in specs and b in specs])
        part = partition(graph, config.partition.capacity)
        spaces = {i + 1: members for i, members in enumerate(part.spaces)}

    compartments: Dict[str, CompartmentPlan] = {
        CORE: CompartmentPlan(CORE, "core", config.machine.core_pkey, None),
        MONITOR: CompartmentPlan(MONITOR, "monitor", config.machine.monitor_pkey, None),
    }
    for asid, members in sorted(spaces.items()):
        if len(members) > config.partition.capacity:
            raise PolicyError(f"address space {asid} holds {len(members)} modules")
        for i, name in enumerate(members):
            spec = specs[name]
            compartments[name] = CompartmentPlan(
                name=name, kind="module", pkey=config.machine.first_module_pkey + i, asid=asid,
                heap_pages=spec.heap_pages, jit_pages=spec.jit_pages, code=bytes.fromhex(spec.code))

    def same_space(a: str, b: str) -> bool:
        sa, sb = compartments[a].asid, compartments[b].asid
        return sa is None or sb is None or sa == sb

    rules = RuleSet()
    for r in doc.transfer_rules:
        if not same_space(r.src, r.tgt):
            raise PolicyError(f"transfer rule {r.src} -> {r.tgt} crosses address spaces")
        rules.add(TransferRule(
            src=r.src, tgt=r.tgt, privilege_class=r.privilege_class or class_id(r.src, r.tgt),
            fields=tuple(FieldCheck(f.offset, f.width, tuple(f.ranges), f.name) for f in r.fields)))

    objects = [SharedObject(o.name, o.src, o.tgt, o.size) for o in doc.privilege_classes]
    class_space: Dict[str, int] = {}
    for o in objects:
        if not same_space(o.src, o.tgt):
            raise PolicyError(f"shared object {o.name} crosses address spaces")
        asid = compartments[o.src].asid or compartments[o.tgt].asid
        if asid is None:
            raise PolicyError(f"shared object {o.name} must involve a module compartment")
        class_space[o.privilege_class] = asid
    layout = assign_privilege_classes(objects)

    compiled = CompiledPolicy(
        name=doc.name, compartments=compartments, spaces=spaces,
        transitions={(a, b) for a, b in doc.transitions}, gates=list(doc.gates), rules=rules,
        shared_objects=objects, layout=layout, partition=part, class_space=class_space)
    logger.info(f"Compiled policy '{doc.name}': {len(modules)} modules in {len(spaces)} address spaces, "
                f"{len(doc.gates)} gates, {len(rules)} transfer rules, {layout.page_count} shared pages")
    return compiled


def load_compiled(path: Path) -> CompiledPolicy:
    return compile_policy(load_policy(path))


def policy_from_json(text: str) -> CompiledPolicy:
    try:
        json.loads(text)
    except json.JSONDecodeError as e:
        raise PolicyLoadError(f"policy is not JSON: {e}") from e
    return compile_policy(parse_policy(text))
