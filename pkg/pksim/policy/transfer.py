"""
Data-transfer rules: which compartment may take ownership of a shared page from
which other one, and the legal value ranges of the fields on that page.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from pksim.errors import NoMatchingRule, PolicyError
from pksim.verdicts import RANGE_VIOLATION, Fail, Pass, Verdict

Range = Tuple[int, int]


def check_ranges(ranges: Sequence[Range]) -> List[Range]:
    """Ranges must be non-empty, inclusive, sorted and disjoint."""
    if not ranges:
        raise PolicyError("a field check needs at least one range")
    out = []
    for lo, hi in ranges:
        if lo > hi:
            raise PolicyError(f"empty range [{lo}, {hi}]")
        if out and lo <= out[-1][1]:
            raise PolicyError(f"range [{lo}, {hi}] overlaps or precedes [{out[-1][0]}, {out[-1][1]}]")
        out.append((int(lo), int(hi)))
    return out


def class_id(src: str, tgt: str) -> str:
    """Privilege class shared by the two compartments, independent of direction."""
    a, b = sorted((src, tgt))
    return f"{a}:{b}"


@dataclass(frozen=True)
class FieldCheck:
    offset: int
    width: int
    ranges: Tuple[Range, ...]
    name: str = ""

    def __post_init__(self):
        if self.width not in (1, 2, 4, 8):
            raise PolicyError(f"field width {self.width} not in 1/2/4/8")
        object.__setattr__(self, "ranges", tuple(check_ranges(self.ranges)))

    def value(self, snapshot: bytes) -> int:
        return int.from_bytes(snapshot[self.offset:self.offset + self.width], "little")

    def admits(self, value: int) -> bool:
        return any(lo <= value <= hi for lo, hi in self.ranges)

    @property
    def label(self) -> str:
        return self.name or f"@{self.offset}"


@dataclass(frozen=True)
class TransferRule:
    src: str
    tgt: str
    privilege_class: str
    fields: Tuple[FieldCheck, ...] = ()


@dataclass
class RuleSet:
    rules: List[TransferRule] = field(default_factory=list)

    def __post_init__(self):
        self._index: Dict[Tuple[str, str, str], TransferRule] = {}
        for rule in self.rules:
            self._index[(rule.src, rule.tgt, rule.privilege_class)] = rule

    def add(self, rule: TransferRule) -> None:
        self.rules.append(rule)
        self._index[(rule.src, rule.tgt, rule.privilege_class)] = rule

    def find(self, src: str, tgt: str, privilege_class: Optional[str] = None) -> TransferRule:
        if privilege_class is not None:
            rule = self._index.get((src, tgt, privilege_class))
            if rule is None:
                raise NoMatchingRule(src, tgt, privilege_class)
            return rule
        for (s, t, _), rule in self._index.items():
            if s == src and t == tgt:
                return rule
        raise NoMatchingRule(src, tgt)

    def __len__(self) -> int:
        return len(self.rules)


def validate_transfer(rule_set: RuleSet, src: str, tgt: str, page_snapshot: bytes,
                      privilege_class: Optional[str] = None) -> Verdict:
    """Pass iff every declared field of the matching rule lies in one of its ranges."""
    rule = rule_set.find(src, tgt, privilege_class)
    for check in rule.fields:
        value = check.value(page_snapshot)
        if not check.admits(value):
            return Fail(RANGE_VIOLATION, f"{check.label}={value}")
    return Pass()
