# config.py

import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

class LoggerConfig:
    # Logging directory
    LOG_DIR = Path(os.getenv("PKSIM_LOG_DIR", "logs"))
    LOG_DIR.mkdir(parents=True, exist_ok=True)
    # Logging level (e.g., 'INFO', 'DEBUG')
    LOG_LEVEL = os.getenv("PKSIM_LOG_LEVEL", 'INFO')

class MachineConfig:
    page_size = 4096
    page_shift = 12

    # Virtual addresses are (directory index, leaf index, offset) packed into 32 bits
    dir_bits = 10
    leaf_bits = 10

    num_pkeys = 16
    # pkey0 core kernel, pkey1 code (XOM), pkey2 monitor
    core_pkey = 0
    code_pkey = 1
    monitor_pkey = 2
    first_module_pkey = 3

    # Direct-mapped TLB
    tlb_capacity = 64
    # Tag TLB entries with the ASID so address-space switches need no flush
    use_pcid = True

    # Model-specific register holding PKRS, and the PKS enable bit in CR4
    pkrs_msr = 0x6E1
    cr4_pks_bit = 24

    # Shared directory slots: code, core kernel data, monitor data, page-table map
    code_dir = 1
    core_dir = 2
    monitor_dir = 3
    ptmap_dir = 4
    # Directory slots that make up the private part of every address space
    private_dir_slots = (8, 9)

    # Frames reserved per module compartment
    code_pages = 1
    data_pages = 1
    stack_pages = 1
    heap_pool_pages = 4

class MonitorConfig:
    # Depth of the per-thread PKRS save stack (nested interrupts)
    max_interrupt_depth = 8
    # How many times S5 may send the switch back to S4 before giving up
    max_loopbacks = 3
    # Gate ids of the monitor entry/exit pair registered at boot
    entry_gate = 0
    exit_gate = 1

class RewriterConfig:
    # Strategies are applied until the scanner is clean or this bound is hit
    iteration_bound = 16
    # Try swapping independent neighbours before inserting a nop
    prefer_reorder = False
    # Load address of rewritten programs and of their gate stub table
    program_base = 0x40000000
    stub_base = 0x7F000000
    # Stub slot spacing for gate substitution
    stub_slot_size = 16
    # Steps an equivalence run may take before it is treated as diverging
    max_steps = 4096
    # Bytes below the final stack pointer ignored when comparing memory (stub return addresses)
    dead_stack_window = 1024

class PartitionConfig:
    # Module pkeys available per address space (pkeys 3..15)
    capacity = 13

class HarnessConfig:
    default_seed = int(os.getenv("PKSIM_SEED", "20240917"))
    report_dir = Path(os.getenv("PKSIM_REPORT_DIR", "reports"))
    # Equivalence runs per rewritten program
    verify_runs = 100
    # Calls issued per bench workload
    bench_calls = 64
    # PT updates a callee performs per call in the monitor-heavy workload
    monitor_heavy_updates = 20

class Configuration:
    logger = LoggerConfig
    machine = MachineConfig
    monitor = MonitorConfig
    rewriter = RewriterConfig
    partition = PartitionConfig
    harness = HarnessConfig

# Global config object
config = Configuration()

# --- Setup Logger based on Config ---
import logging
from pksim.logger import setup_logger

logger = setup_logger()
log_level_map = {
    'DEBUG': logging.DEBUG,
    'INFO': logging.INFO,
    'WARNING': logging.WARNING,
    'ERROR': logging.ERROR,
    'CRITICAL': logging.CRITICAL
}
logger.setLevel(log_level_map.get(config.logger.LOG_LEVEL.upper(), logging.INFO))
logger.debug(f"Logger level set to: {config.logger.LOG_LEVEL}")
# --- End Logger Setup ---
