"""
Packing of shared objects into pages so that one page only ever hosts objects of
one privilege class (the unordered pair of compartments sharing them).
"""
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from config import config
from pksim.errors import ObjectTooLarge
from pksim.policy.transfer import class_id

ALIGNMENT = 8


@dataclass(frozen=True)
class SharedObject:
    name: str
    src: str
    tgt: str
    size: int

    @property
    def privilege_class(self) -> str:
        return class_id(self.src, self.tgt)


@dataclass
class ClassPage:
    privilege_class: str
    # (object name, offset, size)
    objects: List[Tuple[str, int, int]] = field(default_factory=list)
    used: int = 0

    def free(self, page_size: int) -> int:
        return page_size - self.used


@dataclass
class PageLayout:
    pages: List[ClassPage]
    # object name -> (page index, offset)
    placement: Dict[str, Tuple[int, int]]

    @property
    def page_count(self) -> int:
        return len(self.pages)

    def page_class(self) -> Dict[int, str]:
        return {i: p.privilege_class for i, p in enumerate(self.pages)}

    def pages_of(self, privilege_class: str) -> List[int]:
        return [i for i, p in enumerate(self.pages) if p.privilege_class == privilege_class]


def _aligned(size: int) -> int:
    return (size + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def assign_privilege_classes(shared_objects: Sequence[SharedObject],
                             page_size: int = config.machine.page_size) -> PageLayout:
    """First-fit-decreasing per class; classes and ties are ordered by name."""
    by_class: Dict[str, List[SharedObject]] = {}
    for obj in shared_objects:
        if obj.size > page_size:
            raise ObjectTooLarge(f"{obj.name} is {obj.size} bytes, a page holds {page_size}")
        if obj.size <= 0:
            raise ObjectTooLarge(f"{obj.name} has non-positive size {obj.size}")
        by_class.setdefault(obj.privilege_class, []).append(obj)

    pages: List[ClassPage] = []
    placement: Dict[str, Tuple[int, int]] = {}
    for cls in sorted(by_class):
        class_pages: List[int] = []
        for obj in sorted(by_class[cls], key=lambda o: (-o.size, o.name)):
            need = _aligned(obj.size)
            target = next((i for i in class_pages if pages[i].free(page_size) >= min(need, page_size)), None)
            if target is None:
                pages.append(ClassPage(cls))
                target = len(pages) - 1
                class_pages.append(target)
            page = pages[target]
            offset = page.used
            page.objects.append((obj.name, offset, obj.size))
            page.used = min(page_size, offset + need)
            placement[obj.name] = (target, offset)
    return PageLayout(pages, placement)
