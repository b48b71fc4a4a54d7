import time
import datetime
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

from pksim.events import Event
from pksim.logger import setup_logger

# Transition kinds of the histogram
INTRA = "intra"
CROSS = "cross"
MONITOR_ENTRY = "monitor_entry"
MONITOR_EXIT = "monitor_exit"
TRANSITION_KINDS = (INTRA, CROSS, MONITOR_ENTRY, MONITOR_EXIT)


class TimeMetric:
    """Measure wall time of a suite or sweep. Logged only, never reported."""

    def __init__(self):
        self.start_time = None
        self.end_time = None
        self.duration = None
        self.logger = setup_logger()

    def start(self):
        """Start the timer."""
        self.start_time = time.perf_counter()
        self.logger.debug(f"Time measurement started at: {datetime.datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        return self

    def stop(self):
        """Stop the timer and calculate duration."""
        self.end_time = time.perf_counter()
        self.duration = self.end_time - self.start_time
        self.logger.info(f"Time measurement stopped. Duration: {self.duration:.2f} seconds")
        return self.duration

    def get_metrics(self) -> Dict[str, float]:
        """Return time metrics."""
        if self.duration is None:
            self.logger.warning("Attempting to get time metrics before timer has been stopped")
            return {"error": "Timer has not been stopped"}

        return {
            "duration_seconds": self.duration,
            "formatted_duration": str(datetime.timedelta(seconds=self.duration)),
        }


@dataclass
class Metrics:
    """
    Counters of one run. Built either live from the machine (see capture/delta) or
    recomputed from the audit log and the MMU trace; both must agree.
    """
    switches: Counter = field(default_factory=Counter)
    # switch kind -> histogram of micro-step counts
    micro_steps: Dict[str, Counter] = field(default_factory=dict)
    tlb_hits: int = 0
    tlb_misses: int = 0
    tlb_flushes: int = 0
    monitor_entries: int = 0
    monitor_exits: int = 0
    faults: Counter = field(default_factory=Counter)

    # --- Recording ---

    def record_switch(self, kind: str, steps: int) -> None:
        self.switches[kind] += 1
        self.micro_steps.setdefault(kind, Counter())[steps] += 1

    # --- Derived values ---

    def transitions(self) -> Dict[str, int]:
        return {
            INTRA: self.switches[INTRA],
            CROSS: self.switches[CROSS],
            MONITOR_ENTRY: self.monitor_entries,
            MONITOR_EXIT: self.monitor_exits,
        }

    def total_transitions(self) -> int:
        return sum(self.transitions().values())

    def monitor_share(self) -> float:
        total = self.total_transitions()
        if total == 0:
            return 0.0
        return (self.monitor_entries + self.monitor_exits) / total

    def steps_per_switch(self, kind: str) -> Optional[int]:
        """The micro-step count shared by every switch of kind; None if none ran."""
        histogram = self.micro_steps.get(kind)
        if not histogram:
            return None
        if len(histogram) != 1:
            raise ValueError(f"{kind} switches took differing step counts: {dict(histogram)}")
        return next(iter(histogram))

    def total_faults(self) -> int:
        return sum(self.faults.values())

    def is_zero(self) -> bool:
        return self.total_transitions() == 0 and self.total_faults() == 0 and \
            self.tlb_hits == self.tlb_misses == self.tlb_flushes == 0

    # --- Construction ---

    @classmethod
    def from_logs(cls, audit: Iterable[Event], trace: Iterable[Event] = ()) -> "Metrics":
        """Recomputes every counter from audit and trace events."""
        metrics = cls()
        for event in audit:
            if event.kind == "transition":
                metrics.record_switch(event.arg("kind"), int(event.arg("steps")))
            elif event.kind == "enter":
                metrics.monitor_entries += 1
            elif event.kind == "exit":
                metrics.monitor_exits += 1
            elif event.kind == "fault":
                metrics.faults[event.arg("reason")] += 1
            elif event.kind == "trap":
                metrics.faults["PrivilegeTrap"] += 1
            elif event.kind == "switch" and event.verdict.startswith("fault("):
                metrics.faults[event.verdict[len("fault("):-1]] += 1
        for event in trace:
            if event.kind == "translate":
                if event.verdict == "hit":
                    metrics.tlb_hits += 1
                elif event.verdict in ("miss", "unmapped"):
                    metrics.tlb_misses += 1
            elif event.kind == "flush":
                metrics.tlb_flushes += 1
        return metrics

    # --- Output ---

    def get_metrics(self) -> Dict[str, object]:
        """Get the complete counter set as plain values."""
        return {
            "switches": {kind: self.switches[kind] for kind in (INTRA, CROSS)},
            "micro_steps": {kind: dict(sorted(h.items())) for kind, h in sorted(self.micro_steps.items())},
            "tlb": {"hits": self.tlb_hits, "misses": self.tlb_misses, "flushes": self.tlb_flushes},
            "monitor": {"entries": self.monitor_entries, "exits": self.monitor_exits},
            "faults": dict(sorted(self.faults.items())),
            "transitions": self.transitions(),
            "monitor_share": round(self.monitor_share(), 4),
        }

    def rows(self, section: str, name: str) -> List[List[str]]:
        """Report table rows (section, name, metric, value)."""
        out = [
            [section, name, "switches_intra", str(self.switches[INTRA])],
            [section, name, "switches_cross", str(self.switches[CROSS])],
        ]
        for kind, histogram in sorted(self.micro_steps.items()):
            for steps, count in sorted(histogram.items()):
                out.append([section, name, f"micro_steps_{kind}_{steps}", str(count)])
        out += [
            [section, name, "tlb_hits", str(self.tlb_hits)],
            [section, name, "tlb_misses", str(self.tlb_misses)],
            [section, name, "tlb_flushes", str(self.tlb_flushes)],
            [section, name, "monitor_entries", str(self.monitor_entries)],
            [section, name, "monitor_exits", str(self.monitor_exits)],
        ]
        for reason, count in sorted(self.faults.items()):
            out.append([section, name, f"faults_{reason}", str(count)])
        out.append([section, name, "monitor_share", f"{self.monitor_share():.4f}"])
        return out

    def summary(self) -> List[str]:
        t = self.transitions()
        lines = [
            f"switches: intra={t[INTRA]} cross={t[CROSS]}",
            f"micro-steps: " + (", ".join(f"{kind}={dict(sorted(h.items()))}"
                                          for kind, h in sorted(self.micro_steps.items())) or "-"),
            f"tlb: hits={self.tlb_hits} misses={self.tlb_misses} flushes={self.tlb_flushes}",
            f"monitor: entries={self.monitor_entries} exits={self.monitor_exits} "
            f"share={self.monitor_share():.4f}",
            f"faults: " + (", ".join(f"{r}={n}" for r, n in sorted(self.faults.items())) or "0"),
        ]
        return lines


@dataclass
class Baseline:
    """Live counter values at a point in time; deltas against it give the run's metrics."""
    audit_mark: int
    trace_mark: int
    tlb_hits: int
    tlb_misses: int
    tlb_flushes: int
    monitor_entries: int
    monitor_exits: int
    faults: Counter


def capture(machine) -> Baseline:
    tlb = machine.mmu.tlb
    monitor = machine.monitor
    return Baseline(machine.audit.mark(), machine.trace.mark(), tlb.hits, tlb.misses, tlb.flushes,
                    monitor.entries, monitor.exits, Counter(machine.fault_counts))


def live_metrics(machine, baseline: Baseline, switches: Iterable) -> Metrics:
    """Metrics from the machine's counters since baseline plus the switch traces observed."""
    tlb = machine.mmu.tlb
    monitor = machine.monitor
    metrics = Metrics(
        tlb_hits=tlb.hits - baseline.tlb_hits,
        tlb_misses=tlb.misses - baseline.tlb_misses,
        tlb_flushes=tlb.flushes - baseline.tlb_flushes,
        monitor_entries=monitor.entries - baseline.monitor_entries,
        monitor_exits=monitor.exits - baseline.monitor_exits,
        faults=+(Counter(machine.fault_counts) - baseline.faults),
    )
    for trace in switches:
        metrics.record_switch(CROSS if trace.cross_space else INTRA, trace.micro_steps)
    return metrics


def logged_metrics(machine, baseline: Baseline) -> Metrics:
    return Metrics.from_logs(machine.audit.since(baseline.audit_mark), machine.trace.since(baseline.trace_mark))
