"""
Line-oriented event streams.

The MMU trace records one line per access/translate/retag/switch
("event-kind  actor  args  verdict"); the monitor audit log records one line per
monitor operation ("op  caller  verdict  detail"). Both are plain text without
timestamps so that a replay of the same scenario yields identical bytes.
"""
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional

SEPARATOR = "  "


@dataclass(frozen=True)
class Event:
    kind: str
    actor: str
    args: str
    verdict: str

    def line(self, verdict_first: bool = False) -> str:
        args = self.args or "-"
        fields = (self.kind, self.actor, self.verdict, args) if verdict_first else (self.kind, self.actor, args, self.verdict)
        return SEPARATOR.join(fields)

    @classmethod
    def parse(cls, line: str, verdict_first: bool = False) -> "Event":
        parts = line.rstrip("\n").split(SEPARATOR)
        if len(parts) != 4:
            raise ValueError(f"malformed event line: {line!r}")
        if verdict_first:
            kind, actor, verdict, args = parts
        else:
            kind, actor, args, verdict = parts
        return cls(kind, actor, "" if args == "-" else args, verdict)

    def arg(self, key: str, default: Optional[str] = None) -> Optional[str]:
        """Value of a key=value token in args."""
        for token in self.args.split():
            if token.startswith(key + "="):
                return token[len(key) + 1:]
        return default


class EventLog:
    """Append-only list of events with helpers for scanning."""

    def __init__(self, name: str, verdict_first: bool = False):
        self.name = name
        self.verdict_first = verdict_first
        self.enabled = True
        self._events: List[Event] = []

    def record(self, kind: str, actor: str, args: str = "", verdict: str = "ok") -> Optional[Event]:
        if not self.enabled:
            return None
        # Separators inside fields would break parsing
        event = Event(kind, actor.replace(SEPARATOR, " "), args.replace(SEPARATOR, " "), verdict.replace(SEPARATOR, " "))
        self._events.append(event)
        return event

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self._events)

    def since(self, mark: int) -> List[Event]:
        return self._events[mark:]

    def mark(self) -> int:
        return len(self._events)

    def of_kind(self, *kinds: str) -> List[Event]:
        return [e for e in self._events if e.kind in kinds]

    def lines(self) -> List[str]:
        return [e.line(self.verdict_first) for e in self._events]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    @classmethod
    def from_lines(cls, name: str, lines: Iterable[str], verdict_first: bool = False) -> "EventLog":
        log = cls(name, verdict_first)
        for line in lines:
            if line.strip():
                log._events.append(Event.parse(line, verdict_first))
        return log

    def last(self, kind: Optional[str] = None) -> Optional[Event]:
        for event in reversed(self._events):
            if kind is None or event.kind == kind:
                return event
        return None
