"""
Differential check of a rewrite: the original runs with privileged instructions
taking effect directly, the rewritten program runs with its gate stubs, both from the
same random register and memory states, and their end states are compared.
"""
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from config import config
from pksim.isa.decoder import Program
from pksim.isa.instr import REG64, RSP, Instr
from pksim.isa.interpreter import (
    PKRS_MSR, CpuState, DirectHooks, FlatMemory, RegisterFile, RunResult, StubHooks, run,
)
from pksim.logger import setup_logger
from pksim.verdicts import Pass, Verdict

logger = setup_logger()

MASK64 = (1 << 64) - 1
COUNTEREXAMPLE = "Counterexample"


@dataclass
class Counterexample:
    run: int
    seed: int
    initial: RegisterFile
    # First field that differs, e.g. "rbx: 0x1 != 0x2"
    divergence: str

    def describe(self) -> str:
        regs = " ".join(f"{name}={value:#x}" for name, value in zip(REG64, self.initial.gpr))
        return f"run {self.run} (seed {self.seed}): {self.divergence}\n  initial: {regs} zf={int(self.initial.zf)}"


@dataclass
class EndState:
    result: RunResult
    regs: RegisterFile
    memory: FlatMemory


def random_state(rng: np.random.Generator) -> RegisterFile:
    """Register file with every architectural field drawn from rng."""
    words = [int(w) for w in rng.integers(0, np.iinfo(np.uint64).max, size=16, dtype=np.uint64, endpoint=True)]
    regs = RegisterFile()
    regs.gpr = words[:8]
    regs.zf = bool(words[8] & 1)
    regs.msr = {PKRS_MSR: words[9] & 0xFFFFFFFF}
    regs.cr = {0: words[10], 2: words[11], 3: words[12], 4: words[13]}
    regs.gdtr = (words[14] & 0xFFFF, words[14] >> 16)
    regs.idtr = (words[15] & 0xFFFF, words[15] >> 16)
    return regs


def _execute(code: bytes, base_address: int, regs: RegisterFile, memory_seed: int,
             stubs: Optional[Dict[int, Instr]], max_steps: int) -> EndState:
    program = Program(code, base_address)
    memory = FlatMemory(program, memory_seed)
    regs = regs.copy()
    regs.ip = base_address
    hooks = StubHooks(DirectHooks(), stubs) if stubs else DirectHooks()
    state = CpuState(regs, memory, halt_at=program.end_address)
    result = run(state, hooks, max_steps)
    return EndState(result, regs, memory)


def _fault_signature(result: RunResult) -> Tuple:
    fault = result.fault
    if fault is None:
        return (result.status,)
    return (result.status, type(fault).__name__, getattr(fault, "kind", None), getattr(fault, "address", None))


def compare_end_states(a: EndState, b: EndState, scratch: Iterable[int] = (),
                       dead_stack_window: int = config.rewriter.dead_stack_window) -> Optional[str]:
    """First divergence between two end states, or None. ip is not compared."""
    if _fault_signature(a.result) != _fault_signature(b.result):
        return f"outcome: {_fault_signature(a.result)} != {_fault_signature(b.result)}"
    scratch = set(scratch)
    for reg, name in enumerate(REG64):
        if reg in scratch:
            continue
        if a.regs.gpr[reg] != b.regs.gpr[reg]:
            return f"{name}: {a.regs.gpr[reg]:#x} != {b.regs.gpr[reg]:#x}"
    for name in ("zf", "cr", "msr", "gdtr", "idtr"):
        if getattr(a.regs, name) != getattr(b.regs, name):
            return f"{name}: {getattr(a.regs, name)} != {getattr(b.regs, name)}"

    # Stub calls leave return addresses just below the final stack pointer
    top = a.regs.gpr[RSP]
    dead_low = (top - dead_stack_window) & MASK64
    for address in sorted(set(a.memory.written) | set(b.memory.written)):
        if dead_low <= address < top:
            continue
        left, right = a.memory.read(address, 1), b.memory.read(address, 1)
        if left != right:
            return f"mem[{address:#x}]: {left.hex()} != {right.hex()}"
    return None


def verify_equivalence(original: bytes, rewritten: bytes, n_runs: int = config.harness.verify_runs,
                       stubs: Optional[Dict[int, Instr]] = None, scratch: Iterable[int] = (),
                       seed: int = config.harness.default_seed,
                       base_address: int = config.rewriter.program_base,
                       max_steps: int = config.rewriter.max_steps) -> Verdict:
    """
    Pass() when every run ends in the same architectural state (scratch registers and
    the dead stack area excepted); otherwise a fail verdict carrying a Counterexample.
    Run i starts from the state drawn from default_rng([seed, i]).
    """
    scratch = tuple(scratch)
    for i in range(n_runs):
        rng = np.random.default_rng([seed & MASK64, i])
        initial = random_state(rng)
        memory_seed = int(rng.integers(0, np.iinfo(np.uint64).max, dtype=np.uint64, endpoint=True))
        a = _execute(original, base_address, initial, memory_seed, None, max_steps)
        b = _execute(rewritten, base_address, initial, memory_seed, stubs, max_steps)
        divergence = compare_end_states(a, b, scratch)
        if divergence is not None:
            counterexample = Counterexample(i, seed, initial, divergence)
            logger.warning(f"Equivalence failed: {counterexample.describe()}")
            return Verdict("fail", COUNTEREXAMPLE, divergence, counterexample)
    logger.debug(f"Equivalence held over {n_runs} runs (seed {seed})")
    return Pass()
