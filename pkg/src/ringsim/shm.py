"""Simulated physical memory, address spaces, and the trusted grant authority.

Physical memory is a pool of fixed-size pages indexed by integer page id.
Address spaces are pure translation layers from 64-bit virtual addresses onto
pages. The authority owns the page allocation table, enforces per-party page
quotas, validates every host-offered shared grant before it can be mapped,
and models the bus-level world filter: a normal-world access can never reach
a trusted-world page.

Nothing an untrusted party writes into page contents can change any structure
in this module; all metadata lives in private Python objects on the trusted
side of the simulation.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .config import PAGE_SIZE
from .errors import (
    BusFault,
    DuplicatePage,
    NotValidated,
    OutOfMemory,
    OverlapWithPrivate,
    QuotaExceeded,
    RegionIdBusy,
    SizeMismatch,
    VirtualRangeBusy,
)

TRUSTED = "trusted"
NORMAL = "normal"

# registration lifecycle
PENDING = "pending"
VALIDATED = "validated"
MAPPED = "mapped"
REVOKED = "revoked"

READ = "r"
WRITE = "w"


@dataclass
class PageInfo:
    owner: str
    world: str
    purpose: str


@dataclass
class SharedRegistration:
    region_id: int
    pages: tuple[int, ...]
    expected_size: int
    state: str = PENDING


@dataclass
class Mapping:
    base: int
    size: int
    page_ids: tuple[int, ...]
    perms: str
    pages_world: str
    region_id: int | None = None


class AccessMonitor:
    """Audit hook fed by every windowed byte access.

    Armed only by test/fuzz harnesses. Tallies access counts (the step-count
    proxy for bounded-work assertions), recomputes the world check straight
    from the allocation table, and flags accesses landing outside
    caller-declared allowed ranges.
    """

    def __init__(self, table: "PageAllocTable"):
        self._table = table
        self.armed = False
        self.access_count = 0
        self.write_count = 0
        self.violations: list[tuple] = []
        # owner -> list of (base, size) virtual windows considered legitimate
        self.allowed: dict[str, list[tuple[int, int]]] = {}

    def arm(self) -> None:
        self.armed = True

    def disarm(self) -> None:
        self.armed = False

    def mark(self) -> int:
        return self.access_count

    def delta(self, mark: int) -> int:
        return self.access_count - mark

    def on_access(self, space: "AddressSpace", vaddr: int, length: int,
                  mode: str, page_ids: tuple[int, ...]) -> None:
        self.access_count += 1
        if mode == WRITE:
            self.write_count += 1
        if space.world == NORMAL:
            # independent re-check against the table, not the mapping
            for pid in page_ids:
                info = self._table.entries.get(pid)
                if info is None or info.world == TRUSTED:
                    self.violations.append(("world", space.owner, vaddr, pid))
        ranges = self.allowed.get(space.owner)
        if ranges is not None:
            for base, size in ranges:
                if base <= vaddr and vaddr + length <= base + size:
                    break
            else:
                self.violations.append(("window", space.owner, vaddr, length, mode))


class PageAllocTable:
    """Physical page ownership, world tags, and per-party quotas."""

    def __init__(self) -> None:
        self.entries: dict[int, PageInfo] = {}
        self.quotas: dict[str, int] = {}
        self.used: dict[str, int] = {}

    def set_quota(self, owner: str, pages: int) -> None:
        self.quotas[owner] = pages

    def charge(self, owner: str, n: int) -> None:
        limit = self.quotas.get(owner)
        have = self.used.get(owner, 0)
        if limit is not None and have + n > limit:
            raise QuotaExceeded(f"{owner}: {have}+{n} > {limit}")
        self.used[owner] = have + n

    def credit(self, owner: str, n: int) -> None:
        self.used[owner] = self.used.get(owner, 0) - n

    def transfer_quota(self, src: str, dst: str, pages: int) -> None:
        limit = self.quotas.get(src)
        if limit is None:
            raise QuotaExceeded(f"{src} has no finite quota to donate from")
        if limit - self.used.get(src, 0) < pages:
            raise QuotaExceeded(f"{src} cannot spare {pages} pages")
        self.quotas[src] = limit - pages
        self.quotas[dst] = self.quotas.get(dst, 0) + pages


class MemoryWindow:
    """Bounds-checked byte view over one mapped virtual range.

    All reads/writes funnel through here so the monitor sees every access.
    Slices never escape: read() returns copies (snapshots).
    """

    __slots__ = ("_phys", "_space", "base", "length", "_page_ids", "_skew", "_monitor")

    def __init__(self, phys: dict[int, bytearray], space: "AddressSpace",
                 base: int, length: int, page_ids: tuple[int, ...], skew: int,
                 monitor: AccessMonitor):
        self._phys = phys
        self._space = space
        self.base = base
        self.length = length
        self._page_ids = page_ids
        self._skew = skew  # offset of window start within its first page
        self._monitor = monitor

    def _locate(self, off: int, n: int) -> list[tuple[int, int, int]]:
        # -> [(page_id, in_page_offset, chunk_len)]
        if off < 0 or n < 0 or off + n > self.length:
            raise BusFault(f"window access [{off},{off + n}) outside length {self.length}")
        spans = []
        pos = self._skew + off
        remaining = n
        while remaining > 0:
            idx = pos // PAGE_SIZE
            inner = pos % PAGE_SIZE
            chunk = min(remaining, PAGE_SIZE - inner)
            spans.append((self._page_ids[idx], inner, chunk))
            pos += chunk
            remaining -= chunk
        if not spans:  # zero-length access still validates bounds
            idx = min(pos // PAGE_SIZE, len(self._page_ids) - 1)
            spans.append((self._page_ids[idx], pos % PAGE_SIZE, 0))
        return spans

    def read(self, off: int, n: int) -> bytes:
        spans = self._locate(off, n)
        if self._monitor.armed:
            self._monitor.on_access(self._space, self.base + off, n, READ,
                                    tuple(s[0] for s in spans))
        if len(spans) == 1:
            pid, inner, chunk = spans[0]
            return bytes(self._phys[pid][inner:inner + chunk])
        out = bytearray()
        for pid, inner, chunk in spans:
            out += self._phys[pid][inner:inner + chunk]
        return bytes(out)

    def write(self, off: int, data: bytes) -> None:
        spans = self._locate(off, len(data))
        if self._monitor.armed:
            self._monitor.on_access(self._space, self.base + off, len(data), WRITE,
                                    tuple(s[0] for s in spans))
        pos = 0
        for pid, inner, chunk in spans:
            self._phys[pid][inner:inner + chunk] = data[pos:pos + chunk]
            pos += chunk


class AddressSpace:
    """Per-party virtual address space: an ordered set of disjoint mappings."""

    def __init__(self, owner: str, world: str, authority: "MemoryAuthority",
                 base_hint: int = 0x10000):
        self.owner = owner
        self.world = world
        self._authority = authority
        self._maps: list[Mapping] = []  # sorted by base
        self._next_base = base_hint

    def mappings(self) -> list[Mapping]:
        return list(self._maps)

    def fresh_base(self, size: int) -> int:
        base = self._next_base
        # keep ranges page-aligned and leave a guard gap
        self._next_base = base + ((size + PAGE_SIZE - 1) // PAGE_SIZE + 1) * PAGE_SIZE
        return base

    def _find(self, vaddr: int, length: int) -> Mapping | None:
        lo, hi = 0, len(self._maps) - 1
        while lo <= hi:
            mid = (lo + hi) // 2
            m = self._maps[mid]
            if vaddr < m.base:
                hi = mid - 1
            elif vaddr >= m.base + m.size:
                lo = mid + 1
            else:
                if vaddr + length <= m.base + m.size:
                    return m
                return None
        return None

    def add_mapping(self, mapping: Mapping) -> None:
        for m in self._maps:
            if mapping.base < m.base + m.size and m.base < mapping.base + mapping.size:
                raise VirtualRangeBusy(
                    f"{self.owner}: [{mapping.base:#x},+{mapping.size:#x}) overlaps existing")
        self._maps.append(mapping)
        self._maps.sort(key=lambda m: m.base)

    def access(self, vaddr: int, length: int, mode: str = READ) -> MemoryWindow:
        """Resolve a byte window or raise BusFault.

        The window is only handed out when the whole range lies inside one
        mapping whose permissions include the requested mode.
        """
        m = self._find(vaddr, length)
        if m is None:
            raise BusFault(f"{self.owner}: no mapping covers [{vaddr:#x},+{length})")
        if mode not in m.perms:
            raise BusFault(f"{self.owner}: mapping at {m.base:#x} lacks '{mode}'")
        if self.world == NORMAL and m.pages_world == TRUSTED:
            raise BusFault(f"{self.owner}: normal-world access to trusted pages")
        off = vaddr - m.base
        first = off // PAGE_SIZE
        last = (off + max(length, 1) - 1) // PAGE_SIZE
        return MemoryWindow(self._authority.phys, self, vaddr, length,
                            m.page_ids[first:last + 1], off % PAGE_SIZE,
                            self._authority.monitor)


class MemoryAuthority:
    """The trusted side of physical memory management.

    Owns the page pool, the allocation table, shared-grant validation, and
    mapping construction. It is the single writer of all metadata here;
    untrusted parties only ever reach page *contents* through windows.
    """

    def __init__(self, total_pages: int = 65536):
        self.total_pages = total_pages
        self.phys: dict[int, bytearray] = {}
        self.table = PageAllocTable()
        self.monitor = AccessMonitor(self.table)
        self.registrations: dict[int, SharedRegistration] = {}
        self.spaces: list[AddressSpace] = []
        self._free: list[int] = []
        self._next_page = 0

    # --- page pool ---

    def alloc_pages(self, n: int, owner: str, world: str,
                    purpose: str = "anon") -> list[int]:
        if n <= 0:
            raise OutOfMemory("allocation of zero pages")
        if len(self.table.entries) + n > self.total_pages:
            raise OutOfMemory(f"pool of {self.total_pages} pages exhausted")
        self.table.charge(owner, n)
        ids = []
        for _ in range(n):
            if self._free:
                pid = self._free.pop()
            else:
                pid = self._next_page
                self._next_page += 1
            self.phys[pid] = bytearray(PAGE_SIZE)
            self.table.entries[pid] = PageInfo(owner, world, purpose)
            ids.append(pid)
        return ids

    def free_pages(self, page_ids: list[int], owner: str) -> None:
        for pid in page_ids:
            info = self.table.entries.get(pid)
            if info is None or info.owner != owner:
                raise BusFault(f"free of page {pid} not owned by {owner}")
        for pid in sorted(page_ids, reverse=True):
            del self.table.entries[pid]
            del self.phys[pid]
            self._free.append(pid)
        self.table.credit(owner, len(page_ids))

    # --- address spaces ---

    def create_space(self, owner: str, world: str, base_hint: int = 0x10000) -> AddressSpace:
        sp = AddressSpace(owner, world, self, base_hint)
        self.spaces.append(sp)
        return sp

    def map_private(self, space: AddressSpace, page_ids: list[int],
                    base: int | None = None, perms: str = "rw") -> Mapping:
        """Map pages a party already owns into its own space."""
        worlds = {self.table.entries[p].world for p in page_ids}
        if len(worlds) != 1:
            raise BusFault("mixed-world mapping")
        world = worlds.pop()
        if world == TRUSTED and space.world == NORMAL:
            raise BusFault("trusted pages can never enter a normal-world space")
        if base is None:
            base = space.fresh_base(len(page_ids) * PAGE_SIZE)
        m = Mapping(base, len(page_ids) * PAGE_SIZE, tuple(page_ids), perms, world)
        space.add_mapping(m)
        return m

    # --- shared grants ---

    def register_shared(self, pages: list[int], region_id: int,
                        expected_size: int) -> SharedRegistration:
        """Validate a host-offered page grant.

        Accepts if and only if: the region id is unused, the page list has no
        duplicates, every page is a known normal-world page (disjoint from all
        trusted-private and trusted-kernel memory), and page count times page
        size equals the expected size. Rejection raises before any state is
        touched, leaving the authority bit-identical.
        """
        if region_id in self.registrations and \
                self.registrations[region_id].state != REVOKED:
            raise RegionIdBusy(f"region {region_id} already registered")
        seen: set[int] = set()
        for pid in pages:
            if pid in seen:
                raise DuplicatePage(f"page {pid} granted twice")
            seen.add(pid)
        for pid in pages:
            info = self.table.entries.get(pid)
            if info is None:
                raise OverlapWithPrivate(f"page {pid} unknown to the allocation table")
            if info.world == TRUSTED:
                raise OverlapWithPrivate(
                    f"page {pid} is trusted-world ({info.owner}/{info.purpose})")
        if len(pages) * PAGE_SIZE != expected_size:
            raise SizeMismatch(
                f"{len(pages)} pages != expected {expected_size} bytes")
        reg = SharedRegistration(region_id, tuple(pages), expected_size, VALIDATED)
        self.registrations[region_id] = reg
        return reg

    def revoke_registration(self, region_id: int) -> None:
        """Withdraw a validated grant that was never mapped anywhere."""
        reg = self.registrations.get(region_id)
        if reg is None or reg.state != VALIDATED:
            raise NotValidated(f"region {region_id} not revocable")
        reg.state = REVOKED

    def map_region(self, space: AddressSpace, region_id: int,
                   base: int | None = None, perms: str = "rw") -> Mapping:
        """Map a validated grant. The same region may enter several spaces
        (that is what makes it shared); only pending/revoked grants refuse."""
        reg = self.registrations.get(region_id)
        if reg is None or reg.state not in (VALIDATED, MAPPED):
            raise NotValidated(f"region {region_id} not in a mappable state")
        if base is None:
            base = space.fresh_base(reg.expected_size)
        m = Mapping(base, reg.expected_size, reg.pages, perms, NORMAL, region_id)
        space.add_mapping(m)
        reg.state = MAPPED
        return m

    # --- bus-level probe (physical path, gated by the world filter) ---

    def bus_probe(self, world: str, page_id: int, offset: int, n: int,
                  mode: str = READ) -> bytes:
        info = self.table.entries.get(page_id)
        if info is None:
            raise BusFault(f"probe of unallocated page {page_id}")
        if world == NORMAL and info.world == TRUSTED:
            raise BusFault(f"normal-world probe of trusted page {page_id}")
        if offset < 0 or offset + n > PAGE_SIZE:
            raise BusFault("probe outside page")
        if mode == WRITE:
            raise BusFault("bus probe is read-only in this model")
        return bytes(self.phys[page_id][offset:offset + n])

    # --- state digest for atomicity checks ---

    def state_digest(self) -> str:
        h = hashlib.sha256()
        for pid in sorted(self.table.entries):
            info = self.table.entries[pid]
            h.update(f"P{pid}:{info.owner}:{info.world}:{info.purpose};".encode())
        for owner in sorted(self.table.quotas):
            h.update(f"Q{owner}={self.table.quotas[owner]};".encode())
        for owner in sorted(self.table.used):
            h.update(f"U{owner}={self.table.used[owner]};".encode())
        for rid in sorted(self.registrations):
            r = self.registrations[rid]
            h.update(f"R{rid}:{r.pages}:{r.expected_size}:{r.state};".encode())
        for sp in self.spaces:
            h.update(f"S{sp.owner}:{sp.world};".encode())
            for m in sp.mappings():
                h.update(f"M{m.base}:{m.size}:{m.page_ids}:{m.perms};".encode())
        return h.hexdigest()
