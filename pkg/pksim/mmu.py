"""
Frames, two-level pkey-tagged page tables, the ASID-tagged TLB and the PKS access check.

Page tables live in real frames: a directory frame holds 1024 32-bit entries
(present bit 0, leaf-table frame in bits 12..31) and a leaf table holds 1024 32-bit
descriptors laid out as

    bit 0 present | bit 1 writable | bit 2 supervisor | bit 3 no-execute
    bits 4..7 pkey | bits 12..31 frame

Every table frame is also mapped into the page-table map region so that ordinary
stores can be attempted against it; whether they succeed is up to its pkey.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Set, Tuple

from config import config
from pksim.errors import NotMonitor, PoolExhausted, UnknownAddressSpace, UnmappedAddress, WxViolation
from pksim.events import EventLog
from pksim.logger import setup_logger

logger = setup_logger()

PAGE_SIZE = config.machine.page_size
PAGE_SHIFT = config.machine.page_shift
ENTRIES = 1 << config.machine.leaf_bits
DIR_SHIFT = PAGE_SHIFT + config.machine.leaf_bits
VADDR_LIMIT = 1 << (DIR_SHIFT + config.machine.dir_bits)

READ, WRITE, EXECUTE = "read", "write", "execute"


def dir_base(index: int) -> int:
    return index << DIR_SHIFT


def split_vaddr(vaddr: int) -> Tuple[int, int, int]:
    """(directory index, leaf index, offset)."""
    return vaddr >> DIR_SHIFT, (vaddr >> PAGE_SHIFT) & (ENTRIES - 1), vaddr & (PAGE_SIZE - 1)


CODE_BASE = dir_base(config.machine.code_dir)
CORE_BASE = dir_base(config.machine.core_dir)
MONITOR_BASE = dir_base(config.machine.monitor_dir)
PTMAP_BASE = dir_base(config.machine.ptmap_dir)
PRIVATE_BASE = dir_base(config.machine.private_dir_slots[0])
PRIVATE_LIMIT = dir_base(config.machine.private_dir_slots[-1] + 1)


# --- PKRS ---

def notation(pkrs: int, pkey: int) -> Tuple[int, int]:
    """(WD, AD) of pkey in a PKRS word."""
    return (pkrs >> (2 * pkey + 1)) & 1, (pkrs >> (2 * pkey)) & 1


def with_notation(pkrs: int, pkey: int, wd: int, ad: int) -> int:
    pkrs &= ~(3 << (2 * pkey)) & 0xFFFFFFFF
    return pkrs | (ad << (2 * pkey)) | (wd << (2 * pkey + 1))


ALL_RESTRICTED = (1 << (2 * config.machine.num_pkeys)) - 1


def compartment_pkrs(own_pkey: int, readable: Tuple[int, ...] = ()) -> int:
    """PKRS value with (0,0) for own_pkey, read-only for `readable` and (1,1) elsewhere."""
    value = with_notation(ALL_RESTRICTED, own_pkey, 0, 0)
    for pkey in readable:
        value = with_notation(value, pkey, 1, 0)
    return value


def open_pkeys(pkrs: int) -> List[int]:
    return [k for k in range(config.machine.num_pkeys) if notation(pkrs, k) == (0, 0)]


def format_pkrs(pkrs: int) -> str:
    return f"{pkrs:#010x}"


# --- Descriptors and the access check ---

@dataclass(frozen=True)
class PageDescriptor:
    frame: int
    writable: bool = False
    no_execute: bool = True
    supervisor: bool = True
    pkey: int = 0

    def encode(self) -> int:
        return (1 | (int(self.writable) << 1) | (int(self.supervisor) << 2) | (int(self.no_execute) << 3)
                | ((self.pkey & 0xF) << 4) | (self.frame << PAGE_SHIFT))

    @classmethod
    def decode(cls, entry: int) -> Optional["PageDescriptor"]:
        if not entry & 1:
            return None
        return cls(frame=entry >> PAGE_SHIFT, writable=bool(entry & 2), supervisor=bool(entry & 4),
                   no_execute=bool(entry & 8), pkey=(entry >> 4) & 0xF)


@dataclass(frozen=True)
class AccessVerdict:
    allowed: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.allowed

    def __str__(self) -> str:
        return "allow" if self.allowed else f"deny({self.reason})"


ALLOW = AccessVerdict(True)


def Deny(reason: str) -> AccessVerdict:
    return AccessVerdict(False, reason)


def check_access(pkrs: int, desc: PageDescriptor, kind: str) -> AccessVerdict:
    """PKS permission check; instruction fetch ignores the pkey notation."""
    if not desc.supervisor:
        return Deny("user-page")
    if kind == EXECUTE:
        return ALLOW if not desc.no_execute else Deny("NX")
    wd, ad = notation(pkrs, desc.pkey)
    if ad:
        return Deny("AD")
    if kind == READ:
        return ALLOW
    if wd:
        return Deny("WD")
    if not desc.writable:
        return Deny("read-only")
    return ALLOW


# --- Physical memory ---

class PhysicalMemory:
    def __init__(self):
        self.frames: Dict[int, bytearray] = {}
        # Frame 0 is never handed out
        self.next_frame = 1

    def allocate(self) -> int:
        fid = self.next_frame
        self.next_frame += 1
        self.frames[fid] = bytearray(PAGE_SIZE)
        return fid

    def frame(self, fid: int) -> bytearray:
        return self.frames[fid]

    def read(self, fid: int, offset: int, length: int) -> bytes:
        return bytes(self.frames[fid][offset:offset + length])

    def write(self, fid: int, offset: int, data: bytes) -> None:
        self.frames[fid][offset:offset + len(data)] = data

    def read_u32(self, fid: int, index: int) -> int:
        return int.from_bytes(self.frames[fid][4 * index:4 * index + 4], "little")

    def write_u32(self, fid: int, index: int, value: int) -> None:
        self.frames[fid][4 * index:4 * index + 4] = (value & 0xFFFFFFFF).to_bytes(4, "little")


# --- TLB ---

class Tlb:
    """Direct-mapped TLB keyed by (ASID, virtual page)."""

    def __init__(self, capacity: int = config.machine.tlb_capacity):
        self.capacity = capacity
        self.slots: List[Optional[Tuple[int, int, PageDescriptor]]] = [None] * capacity
        self.hits = 0
        self.misses = 0
        self.flushes = 0
        self.invalidations = 0

    def _slot(self, asid: int, vpage: int) -> int:
        return (vpage ^ (asid * 0x9E37)) % self.capacity

    def lookup(self, asid: int, vpage: int) -> Optional[PageDescriptor]:
        entry = self.slots[self._slot(asid, vpage)]
        if entry is not None and entry[0] == asid and entry[1] == vpage:
            self.hits += 1
            return entry[2]
        self.misses += 1
        return None

    def fill(self, asid: int, vpage: int, desc: PageDescriptor) -> None:
        self.slots[self._slot(asid, vpage)] = (asid, vpage, desc)

    def invalidate(self, asid: int, vpage: int) -> None:
        i = self._slot(asid, vpage)
        entry = self.slots[i]
        if entry is not None and entry[0] == asid and entry[1] == vpage:
            self.slots[i] = None
            self.invalidations += 1

    def flush(self) -> None:
        self.slots = [None] * self.capacity
        self.flushes += 1


# --- Address spaces and pools ---

@dataclass
class AddressSpace:
    asid: int
    pgdir: int
    name: str = ""
    compartments: List[str] = field(default_factory=list)
    # dir index -> leaf table frame of the private part (kept while unmapped)
    private_tables: Dict[int, int] = field(default_factory=dict)

    @property
    def cr3(self) -> int:
        return (self.pgdir << PAGE_SHIFT) | self.asid


@dataclass(frozen=True)
class PageRange:
    start: int
    n_pages: int
    frames: Tuple[int, ...] = ()

    @property
    def end(self) -> int:
        return self.start + self.n_pages * PAGE_SIZE

    def __contains__(self, vaddr: int) -> bool:
        return self.start <= vaddr < self.end

    def pages(self) -> Iterator[int]:
        return iter(range(self.start, self.end, PAGE_SIZE))


@dataclass
class FramePool:
    owner: str
    pkey: int
    asid: int
    free: List[int] = field(default_factory=list)
    used: List[int] = field(default_factory=list)


class MonitorAuthority:
    """Capability object; only its holder may mutate page tables."""

    def __repr__(self) -> str:
        return "monitor"


BOOT = "boot"


class Mmu:
    def __init__(self, physical: Optional[PhysicalMemory] = None, trace: Optional[EventLog] = None,
                 use_pcid: bool = config.machine.use_pcid):
        self.physical = physical or PhysicalMemory()
        self.trace = trace if trace is not None else EventLog("trace")
        self.use_pcid = use_pcid
        self.tlb = Tlb()
        self.spaces: Dict[int, AddressSpace] = {}
        self.active_asid: Optional[int] = None
        self.pools: Dict[str, FramePool] = {}
        self.pt_frames: Set[int] = set()
        # table frame -> its vaddr in the page-table map
        self.ptmap: Dict[int, int] = {}
        self.directory_writes = 0
        self.pte_writes = 0
        self._authority: Optional[MonitorAuthority] = None
        self._next_private_vpage = PRIVATE_BASE >> PAGE_SHIFT
        self._next_ptmap = PTMAP_BASE
        # Boot-time tables are mapped with the core pkey until the monitor protects them
        self.pt_pkey = config.machine.core_pkey

        self.shared_tables: Dict[int, int] = {}
        # The page-table map comes first: every later table is mapped through it
        for d in (config.machine.ptmap_dir, config.machine.code_dir,
                  config.machine.core_dir, config.machine.monitor_dir):
            self.shared_tables[d] = self._new_table(BOOT)

    # --- Authority ---

    def claim_authority(self, protect_tables: bool = True) -> MonitorAuthority:
        if self._authority is not None:
            raise NotMonitor("second claimant", "claim_authority")
        self._authority = MonitorAuthority()
        if protect_tables:
            self.pt_pkey = config.machine.monitor_pkey
        return self._authority

    def _require(self, actor, operation: str) -> str:
        if self._authority is None and actor == BOOT:
            return BOOT
        if self._authority is None or actor is not self._authority:
            self.trace.record(operation, str(actor), "", "deny(not-monitor)")
            raise NotMonitor(actor, operation)
        return "monitor"

    @property
    def sealed(self) -> bool:
        return self._authority is not None

    # --- Table frames ---

    def _new_table(self, tag: str) -> int:
        fid = self.physical.allocate()
        self.pt_frames.add(fid)
        vaddr = self._next_ptmap
        self._next_ptmap += PAGE_SIZE
        self.ptmap[fid] = vaddr
        ptmap_table = self.shared_tables.get(config.machine.ptmap_dir, fid)
        _, leaf, _ = split_vaddr(vaddr)
        desc = PageDescriptor(frame=fid, writable=True, no_execute=True, pkey=self.pt_pkey)
        self._write_pte(ptmap_table, leaf, desc.encode(), tag)
        return fid

    def _write_pte(self, table: int, index: int, value: int, tag: str) -> None:
        self.physical.write_u32(table, index, value)
        self.pte_writes += 1
        self.trace.record("pt_write", tag, f"table={table} idx={index} val={value:#010x}")

    def _write_pde(self, pgdir: int, index: int, value: int, tag: str) -> None:
        self.physical.write_u32(pgdir, index, value)
        self.directory_writes += 1
        self.trace.record("pd_write", tag, f"pgdir={pgdir} idx={index} val={value:#010x}")

    # --- Address spaces ---

    def create_space(self, asid: int, actor=BOOT, name: str = "") -> AddressSpace:
        tag = self._require(actor, "create_space")
        if asid in self.spaces:
            raise UnknownAddressSpace(f"ASID {asid} already registered")
        pgdir = self._new_table(tag)
        for d, table in self.shared_tables.items():
            self._write_pde(pgdir, d, (table << PAGE_SHIFT) | 1, tag)
        space = AddressSpace(asid=asid, pgdir=pgdir, name=name or f"as{asid}")
        for d in config.machine.private_dir_slots:
            space.private_tables[d] = self._new_table(tag)
        self.spaces[asid] = space
        if self.active_asid is None:
            self._attach_private(space, tag)
            self.active_asid = asid
        self.trace.record("create_space", tag, f"asid={asid} pgdir={pgdir}")
        return space

    def space(self, asid: Optional[int] = None) -> AddressSpace:
        asid = self.active_asid if asid is None else asid
        if asid not in self.spaces:
            raise UnknownAddressSpace(f"ASID {asid} is not registered")
        return self.spaces[asid]

    @property
    def active(self) -> AddressSpace:
        return self.space()

    def registered_cr3(self) -> Set[Tuple[int, int]]:
        return {(s.pgdir, s.asid) for s in self.spaces.values()}

    def _attach_private(self, space: AddressSpace, tag: str) -> None:
        for d, table in space.private_tables.items():
            self._write_pde(space.pgdir, d, (table << PAGE_SHIFT) | 1, tag)

    def _detach_private(self, space: AddressSpace, tag: str) -> None:
        for d in space.private_tables:
            self._write_pde(space.pgdir, d, 0, tag)

    def switch_address_space(self, asid: int, actor) -> AddressSpace:
        """Unmaps the active space's private part, maps the target's and loads its ASID."""
        tag = self._require(actor, "switch")
        if asid not in self.spaces:
            raise UnknownAddressSpace(f"ASID {asid} is not registered")
        target = self.spaces[asid]
        source = self.spaces.get(self.active_asid)
        if source is target:
            return target
        if source is not None:
            self._detach_private(source, tag)
        self._attach_private(target, tag)
        self.active_asid = asid
        if not self.use_pcid:
            self.tlb.flush()
            self.trace.record("flush", tag, f"asid={asid}")
        self.trace.record("switch", tag, f"asid={source.asid if source else '-'}->{asid}")
        return target

    def root_entries(self, asid: int) -> Tuple[int, ...]:
        pgdir = self.spaces[asid].pgdir
        return tuple(self.physical.read_u32(pgdir, i) for i in range(ENTRIES))

    # --- Walk and translate ---

    def _leaf_table(self, space: AddressSpace, d: int) -> Optional[int]:
        pde = self.physical.read_u32(space.pgdir, d)
        return pde >> PAGE_SHIFT if pde & 1 else None

    def walk(self, space: AddressSpace, vaddr: int) -> Optional[PageDescriptor]:
        if not 0 <= vaddr < VADDR_LIMIT:
            return None
        d, leaf, _ = split_vaddr(vaddr)
        table = self._leaf_table(space, d)
        if table is None:
            return None
        return PageDescriptor.decode(self.physical.read_u32(table, leaf))

    def translate(self, vaddr: int, space: Optional[AddressSpace] = None,
                  actor: str = "cpu") -> Tuple[PageDescriptor, bool]:
        """Descriptor for vaddr and whether the TLB served it."""
        space = space or self.active
        vpage = vaddr >> PAGE_SHIFT
        if not 0 <= vaddr < VADDR_LIMIT:
            self.trace.record("translate", actor, f"{vaddr:#x} asid={space.asid}", "out-of-range")
            raise UnmappedAddress(vaddr, space.asid)
        cached = self.tlb.lookup(space.asid, vpage)
        if cached is not None:
            self.trace.record("translate", actor, f"{vaddr:#x} asid={space.asid}", "hit")
            return cached, True
        desc = self.walk(space, vaddr)
        if desc is None:
            self.trace.record("translate", actor, f"{vaddr:#x} asid={space.asid}", "unmapped")
            raise UnmappedAddress(vaddr, space.asid)
        self.tlb.fill(space.asid, vpage, desc)
        self.trace.record("translate", actor, f"{vaddr:#x} asid={space.asid}", "miss")
        return desc, False

    def physical_address(self, vaddr: int, space: Optional[AddressSpace] = None) -> Tuple[int, int]:
        """(frame, offset) by table walk, without touching the TLB. Inactive spaces resolve through their own tables."""
        space = space or self.active
        if space.asid == self.active_asid:
            desc = self.walk(space, vaddr)
        else:
            desc = self._lookup(space, vaddr)
        if desc is None:
            raise UnmappedAddress(vaddr, space.asid)
        return desc.frame, vaddr & (PAGE_SIZE - 1)

    # --- Mutation (monitor only) ---

    def _table_for(self, space: AddressSpace, d: int) -> int:
        if d in self.shared_tables:
            return self.shared_tables[d]
        if d in space.private_tables:
            return space.private_tables[d]
        raise UnmappedAddress(d << DIR_SHIFT, space.asid)

    def _lookup(self, space: AddressSpace, vaddr: int) -> Optional[PageDescriptor]:
        if not 0 <= vaddr < VADDR_LIMIT:
            return None
        d, leaf, _ = split_vaddr(vaddr)
        table = self.shared_tables.get(d, space.private_tables.get(d))
        if table is None:
            return None
        return PageDescriptor.decode(self.physical.read_u32(table, leaf))

    def _invalidate(self, vpage: int, d: int, space: AddressSpace) -> None:
        if d in self.shared_tables:
            for asid in self.spaces:
                self.tlb.invalidate(asid, vpage)
        else:
            self.tlb.invalidate(space.asid, vpage)

    def map_page(self, vaddr: int, desc: PageDescriptor, actor, space: Optional[AddressSpace] = None) -> None:
        tag = self._require(actor, "map")
        if desc.writable and not desc.no_execute:
            raise WxViolation(f"{vaddr:#x} would be writable and executable")
        space = space or self.active
        d, leaf, _ = split_vaddr(vaddr)
        table = self._table_for(space, d)
        self._write_pte(table, leaf, desc.encode(), tag)
        self._invalidate(vaddr >> PAGE_SHIFT, d, space)
        self.trace.record("map", tag, f"{vaddr:#x} frame={desc.frame} pkey={desc.pkey}")

    def unmap_page(self, vaddr: int, actor, space: Optional[AddressSpace] = None) -> None:
        tag = self._require(actor, "unmap")
        space = space or self.active
        d, leaf, _ = split_vaddr(vaddr)
        self._write_pte(self._table_for(space, d), leaf, 0, tag)
        self._invalidate(vaddr >> PAGE_SHIFT, d, space)
        self.trace.record("unmap", tag, f"{vaddr:#x}")

    def descriptor(self, vaddr: int, space: Optional[AddressSpace] = None) -> PageDescriptor:
        space = space or self.active
        d, leaf, _ = split_vaddr(vaddr)
        desc = PageDescriptor.decode(self.physical.read_u32(self._table_for(space, d), leaf))
        if desc is None:
            raise UnmappedAddress(vaddr, space.asid)
        return desc

    def update_page(self, vaddr: int, actor, space: Optional[AddressSpace] = None, **changes) -> PageDescriptor:
        """Rewrites fields of an existing descriptor (pkey, writable, no_execute)."""
        space = space or self.active
        old = self.descriptor(vaddr, space)
        new = replace(old, **changes)
        self.map_page(vaddr & ~(PAGE_SIZE - 1), new, actor, space)
        return new

    def set_pkey(self, vaddr: int, pkey: int, actor, space: Optional[AddressSpace] = None) -> PageDescriptor:
        """Retags one page; frame and contents stay as they are."""
        tag = self._require(actor, "set_pkey")
        space = space or self.active
        old = self.descriptor(vaddr, space)
        new = replace(old, pkey=pkey)
        d, leaf, _ = split_vaddr(vaddr)
        self._write_pte(self._table_for(space, d), leaf, new.encode(), tag)
        self._invalidate(vaddr >> PAGE_SHIFT, d, space)
        self.trace.record("retag", tag, f"{vaddr & ~(PAGE_SIZE - 1):#x} pkey={old.pkey}->{pkey} frame={old.frame}")
        return new

    # --- Private pools ---

    def reserve_pool(self, owner: str, pkey: int, asid: int, n_frames: int, actor=BOOT) -> FramePool:
        self._require(actor, "reserve_pool")
        pool = FramePool(owner=owner, pkey=pkey, asid=asid,
                         free=[self.physical.allocate() for _ in range(n_frames)])
        self.pools[owner] = pool
        return pool

    def next_private_range(self, n_pages: int) -> int:
        start = self._next_private_vpage << PAGE_SHIFT
        if start + n_pages * PAGE_SIZE > PRIVATE_LIMIT:
            raise PoolExhausted("private region", n_pages, (PRIVATE_LIMIT - start) // PAGE_SIZE)
        self._next_private_vpage += n_pages
        return start

    def alloc_private(self, owner: str, n_pages: int, actor, writable: bool = True) -> PageRange:
        """Maps n_pages from owner's pool into its address space, tagged with its pkey."""
        tag = self._require(actor, "alloc_private")
        pool = self.pools[owner]
        if len(pool.free) < n_pages:
            self.trace.record("alloc", tag, f"owner={owner} pages={n_pages}", "exhausted")
            raise PoolExhausted(owner, n_pages, len(pool.free))
        frames = tuple(pool.free[:n_pages])
        del pool.free[:n_pages]
        pool.used.extend(frames)
        start = self.next_private_range(n_pages)
        space = self.spaces[pool.asid]
        for i, fid in enumerate(frames):
            self.map_page(start + i * PAGE_SIZE,
                          PageDescriptor(frame=fid, writable=writable, no_execute=True, pkey=pool.pkey),
                          actor, space)
        self.trace.record("alloc", tag, f"owner={owner} start={start:#x} pages={n_pages}")
        return PageRange(start, n_pages, frames)

    # --- Inspection ---

    def mappings(self, space: Optional[AddressSpace] = None) -> Iterator[Tuple[int, PageDescriptor]]:
        """Every mapped (vaddr, descriptor) visible in space."""
        space = space or self.active
        for d in range(ENTRIES):
            table = self._leaf_table(space, d)
            if table is None:
                continue
            for leaf in range(ENTRIES):
                desc = PageDescriptor.decode(self.physical.read_u32(table, leaf))
                if desc is not None:
                    yield (d << DIR_SHIFT) | (leaf << PAGE_SHIFT), desc

    def all_mappings(self) -> Iterator[Tuple[int, int, PageDescriptor]]:
        """(asid, vaddr, descriptor) over shared tables once and every space's private tables."""
        for d, table in sorted(self.shared_tables.items()):
            for leaf in range(ENTRIES):
                desc = PageDescriptor.decode(self.physical.read_u32(table, leaf))
                if desc is not None:
                    yield -1, (d << DIR_SHIFT) | (leaf << PAGE_SHIFT), desc
        for asid, space in sorted(self.spaces.items()):
            for d, table in sorted(space.private_tables.items()):
                for leaf in range(ENTRIES):
                    desc = PageDescriptor.decode(self.physical.read_u32(table, leaf))
                    if desc is not None:
                        yield asid, (d << DIR_SHIFT) | (leaf << PAGE_SHIFT), desc

    def wx_violations(self) -> List[Tuple[int, int]]:
        return [(asid, vaddr) for asid, vaddr, desc in self.all_mappings()
                if desc.writable and not desc.no_execute]
