"""
Bringing up a machine from a compiled policy: address spaces, compartments and
their pages, the monitor, the switch-gate table with the policy's gates, and the
boot thread running in the core kernel.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from config import config
from pksim.errors import PolicyError
from pksim.isa.instr import RSP, Instr
from pksim.logger import setup_logger
from pksim.machine import Compartment, Defenses, Machine, Thread
from pksim.mmu import BOOT, PageRange
from pksim.monitor import PKS_BIT, Monitor
from pksim.policy.model import CORE, MONITOR, CompiledPolicy
from pksim.sgt import SwitchGateTable, register_gate

logger = setup_logger()

# mov ecx, <pkrs msr> ; wrmsr ; ret
MONITOR_CODE = b"\xb9" + config.machine.pkrs_msr.to_bytes(4, "little") + b"\x0f\x30\xc3"


@dataclass
class System:
    machine: Machine
    monitor: Monitor
    sgt: SwitchGateTable
    policy: CompiledPolicy
    # gate name -> (call gate id, return gate id)
    gates: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    # shared object name -> virtual address
    objects: Dict[str, int] = field(default_factory=dict)
    stub_base: int = 0

    @property
    def defenses(self) -> Defenses:
        return self.machine.defenses

    def compartment(self, name: str) -> Compartment:
        return self.machine.compartment(name)

    def gate_ids(self, name: str) -> Tuple[int, int]:
        return self.gates[name]

    def become(self, name: str, address: Optional[int] = None) -> Compartment:
        """Resumes the running thread inside compartment name (scheduler path)."""
        compartment = self.compartment(name)
        self.monitor.place(compartment, address)
        return compartment

    def spawn(self, name: str) -> Thread:
        """New thread whose initial rights are those of compartment name."""
        compartment = self.compartment(name)
        thread = self.machine.spawn_thread(compartment.pkrs)
        thread.regs.ip = compartment.code.start
        thread.regs.write(RSP, compartment.stack_pointer)
        self.monitor.start_thread(thread, compartment.pkrs)
        return thread

    def stub_address(self, index: int) -> int:
        return self.stub_base + index * config.rewriter.stub_slot_size

    def install_stubs(self, stubs: Dict[int, Instr]) -> None:
        self.machine.stubs.update(stubs)

    def run_program(self, name: str, code: bytes, offset: int = 0, max_steps: int = config.rewriter.max_steps):
        """Loads code into compartment name's code page at offset and runs it there to its end."""
        compartment = self.compartment(name)
        start = compartment.code_address(offset)
        if start + len(code) > compartment.code.end:
            raise PolicyError(f"{len(code)} bytes at offset {offset} do not fit the code of {name}")
        self.become(name, start)
        self.machine.load_bytes(start, code)
        return self.machine.run(max_steps, halt_at=start + len(code))


def _shared_compartment(machine: Machine, name: str, kind: str, pkey: int, directory: int, code: bytes) -> Compartment:
    m = config.machine
    code_pages = machine.map_shared(m.code_dir, m.code_pages, m.code_pkey, BOOT, writable=False, executable=True)
    data = machine.map_shared(directory, m.data_pages, pkey, BOOT)
    stack = machine.map_shared(directory, m.stack_pages, pkey, BOOT)
    machine.load_bytes(code_pages.start, code)
    return machine.add_compartment(Compartment(name, kind, pkey, None, code=code_pages, data=data, stack=stack))


def _module_compartment(machine: Machine, monitor: Monitor, plan) -> Compartment:
    m = config.machine
    authority = monitor.authority
    code = machine.map_private(plan.asid, m.code_pages, m.code_pkey, authority, writable=False, executable=True)
    machine.mmu.reserve_pool(plan.name, plan.pkey, plan.asid, m.data_pages + m.stack_pages + plan.heap_pages, authority)
    data = machine.mmu.alloc_private(plan.name, m.data_pages, authority)
    stack = machine.mmu.alloc_private(plan.name, m.stack_pages, authority)
    jit: List[PageRange] = []
    for _ in range(plan.jit_pages):
        pages = machine.map_private(plan.asid, 1, m.code_pkey, authority, writable=False, executable=True)
        monitor.jit_pages.add(pages.start)
        jit.append(pages)
    compartment = Compartment(plan.name, "module", plan.pkey, plan.asid, monitor.pkrs_for(plan.pkey),
                              code=code, data=data, stack=stack, jit=jit)
    # Loader writes go to the frames directly; the module's space need not be active
    for i, frame in enumerate(code.frames):
        chunk = plan.code[i * m.page_size:(i + 1) * m.page_size]
        if chunk:
            machine.mmu.physical.write(frame, 0, chunk)
    return machine.add_compartment(compartment)


def _class_pages(machine: Machine, monitor: Monitor, policy: CompiledPolicy) -> Dict[str, int]:
    """Maps one page per layout page, owned by the first sharer of its first object."""
    by_name = {o.name: o for o in policy.shared_objects}
    objects: Dict[str, int] = {}
    for page in policy.layout.pages:
        first = by_name[page.objects[0][0]]
        owner_name = first.src if policy.compartments[first.src].kind == "module" else first.tgt
        owner = machine.compartment(owner_name)
        asid = policy.class_space[page.privilege_class]
        pages = machine.map_private(asid, 1, owner.pkey, monitor.authority)
        monitor.page_classes[pages.start] = page.privilege_class
        for name, offset, _ in page.objects:
            objects[name] = pages.start + offset
    return objects


def boot(policy: CompiledPolicy, defenses: Optional[Defenses] = None,
         use_pcid: bool = config.machine.use_pcid) -> System:
    """Builds a running system for policy; raises PolicyError if a policy gate is rejected."""
    m = config.machine
    machine = Machine(defenses, use_pcid)
    for asid in sorted(policy.spaces) or [1]:
        machine.mmu.create_space(asid, BOOT)

    core = _shared_compartment(machine, CORE, "core", m.core_pkey, m.core_dir, b"\xc3")
    mon = _shared_compartment(machine, MONITOR, "monitor", m.monitor_pkey, m.monitor_dir, MONITOR_CODE)

    monitor = Monitor(machine, policy)
    core.pkrs = monitor.default_restricted
    mon.pkrs = monitor.monitor_pkrs
    sgt = SwitchGateTable(monitor)

    for plan in sorted((p for p in policy.compartments.values() if p.kind == "module"),
                       key=lambda p: (p.asid, p.pkey)):
        _module_compartment(machine, monitor, plan)

    system = System(machine, monitor, sgt, policy)
    system.objects = _class_pages(machine, monitor, policy)
    system.stub_base = machine.map_shared(m.code_dir, 1, m.code_pkey, monitor.authority,
                                          writable=False, executable=True).start

    for spec in policy.gates:
        verdict = register_gate(machine, spec)
        if not verdict:
            raise PolicyError(f"gate {spec.name} rejected at boot: {verdict.reason} {verdict.detail}")
        system.gates[spec.name] = verdict.value

    regs = machine.regs
    regs.cr[4] = PKS_BIT
    regs.cr[3] = machine.mmu.active.cr3
    monitor.start_thread(machine.thread, core.pkrs)
    monitor.place(core)
    logger.info(f"Booted '{policy.name}': {len(machine.compartments)} compartments in "
                f"{len(machine.mmu.spaces)} address spaces, {len(system.gates)} gates")
    return system
