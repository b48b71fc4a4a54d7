"""
Module dependency graphs (modules.dep semantics: an edge a -> b means a depends on b).
"""
import json
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

import numpy as np

from pksim.errors import PolicyLoadError
from pksim.logger import setup_logger

logger = setup_logger()


class DependencyGraph:
    def __init__(self, modules: Iterable[str] = (), edges: Iterable[Tuple[str, str]] = ()):
        self.deps: Dict[str, Set[str]] = {}
        for m in modules:
            self.deps.setdefault(m, set())
        for a, b in edges:
            if a == b:
                raise PolicyLoadError(f"self-dependency on {a}")
            self.deps.setdefault(a, set()).add(b)
            self.deps.setdefault(b, set())
        self._closure: Dict[str, FrozenSet[str]] = {}

    @property
    def modules(self) -> List[str]:
        return sorted(self.deps)

    def edges(self) -> List[Tuple[str, str]]:
        return sorted((a, b) for a, targets in self.deps.items() for b in targets)

    def direct(self, module: str) -> List[str]:
        return sorted(self.deps[module])

    def dependents(self, module: str) -> List[str]:
        return sorted(a for a, targets in self.deps.items() if module in targets)

    def closure(self, module: str) -> FrozenSet[str]:
        """Transitive dependencies of module (excluding itself unless on a cycle)."""
        cached = self._closure.get(module)
        if cached is not None:
            return cached
        seen: Set[str] = set()
        stack = list(self.deps[module])
        while stack:
            m = stack.pop()
            if m in seen:
                continue
            seen.add(m)
            stack.extend(self.deps[m] - seen)
        result = frozenset(seen)
        self._closure[module] = result
        return result

    def components(self) -> List[List[str]]:
        """Weakly connected components, each sorted, ordered by their first module."""
        neighbours: Dict[str, Set[str]] = {m: set(d) for m, d in self.deps.items()}
        for a, b in self.edges():
            neighbours[b].add(a)
        seen: Set[str] = set()
        out = []
        for m in self.modules:
            if m in seen:
                continue
            comp, stack = [], [m]
            seen.add(m)
            while stack:
                x = stack.pop()
                comp.append(x)
                for y in neighbours[x]:
                    if y not in seen:
                        seen.add(y)
                        stack.append(y)
            out.append(sorted(comp))
        return out

    def __len__(self) -> int:
        return len(self.deps)

    # --- Serialization ---

    def to_dict(self) -> dict:
        return {"modules": self.modules, "edges": [list(e) for e in self.edges()]}

    @classmethod
    def from_dict(cls, data: dict) -> "DependencyGraph":
        try:
            return cls(data.get("modules", []), [tuple(e) for e in data.get("edges", [])])
        except (TypeError, ValueError, AttributeError) as e:
            raise PolicyLoadError(f"malformed dependency graph: {e}") from e

    @classmethod
    def from_modules_dep(cls, text: str) -> "DependencyGraph":
        """Parses `path/a.ko: path/b.ko path/c.ko` lines."""
        def name(path: str) -> str:
            base = Path(path.strip()).name
            for suffix in (".ko.xz", ".ko.gz", ".ko.zst", ".ko"):
                if base.endswith(suffix):
                    return base[:-len(suffix)]
            return base

        modules, edges = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise PolicyLoadError(f"modules.dep line {lineno}: missing ':'")
            head, _, tail = line.partition(":")
            module = name(head)
            modules.append(module)
            edges.extend((module, name(dep)) for dep in tail.split())
        return cls(modules, edges)

    @classmethod
    def load(cls, path: Path) -> "DependencyGraph":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise PolicyLoadError(f"cannot read {path}: {e}") from e
        if path.suffix == ".json":
            try:
                return cls.from_dict(json.loads(text))
            except json.JSONDecodeError as e:
                raise PolicyLoadError(f"{path}: {e}") from e
        return cls.from_modules_dep(text)


def synthetic_graph(n_modules: int = 160, max_out_degree: int = 12, cluster_size: int = 13,
                    seed: int = 0, rng: Optional[np.random.Generator] = None) -> DependencyGraph:
    """
    Locality-shaped graph: modules form clusters of at most cluster_size and only
    depend on earlier members of their own cluster, with power-law out-degrees.
    """
    rng = rng or np.random.default_rng(seed)
    names = [f"mod{i:03d}" for i in range(n_modules)]
    edges = []
    for start in range(0, n_modules, cluster_size):
        cluster = names[start:start + cluster_size]
        for i, module in enumerate(cluster):
            if i == 0:
                continue
            degree = int(min(rng.zipf(2.0), max_out_degree, i))
            picks = rng.choice(i, size=degree, replace=False)
            edges.extend((module, cluster[int(j)]) for j in sorted(picks))
    logger.debug(f"Generated graph with {n_modules} modules and {len(edges)} edges")
    return DependencyGraph(names, edges)
