"""
Run reports: a human-readable text and a comma-separated table whose header row
never changes, so tables from different runs can be concatenated.
"""
import csv
import io
from dataclasses import dataclass, field
from typing import List, Sequence

from pksim.harness.metrics import Metrics

CSV_HEADER = ("section", "name", "metric", "value")


@dataclass
class Report:
    title: str
    seed: int
    lines: List[str] = field(default_factory=list)
    rows: List[List[str]] = field(default_factory=list)
    failed: bool = False

    def add(self, line: str) -> None:
        self.lines.append(line)

    def row(self, section: str, name: str, metric: str, value) -> None:
        self.rows.append([section, name, metric, str(value)])

    def add_metrics(self, section: str, name: str, metrics: Metrics) -> None:
        self.lines += [f"  {line}" for line in metrics.summary()]
        self.rows += metrics.rows(section, name)

    def text(self) -> str:
        out = [f"# {self.title}", f"seed: {self.seed}", ""]
        out += self.lines
        out += ["", f"result: {'FAIL' if self.failed else 'ok'}"]
        return "\n".join(out) + "\n"

    def table(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerow(["run", self.title, "seed", str(self.seed)])
        writer.writerows(self.rows)
        return buffer.getvalue()


def parse_table(text: str) -> List[Sequence[str]]:
    """Rows of a report table without its header; raises ValueError on a foreign header."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError("not a report table")
    return rows[1:]
