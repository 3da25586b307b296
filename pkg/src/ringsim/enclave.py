"""Hardened enclave-side interface to the shared rings.

Callers never touch ring memory directly: submissions are reserved through
index-based handles, completion correlation state lives in a private table
keyed by a strictly monotonic internal id, and every address that enters a
submission is translated through a private, sorted translation table. All
operations run a statically bounded number of steps regardless of anything
the host writes into shared memory.
"""
from __future__ import annotations

import bisect
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import NamedTuple

from . import ring as ringmod
from .config import DEEP_TRANSLATE_MAX, PAGE_SIZE, SimConfig
from .errors import EmptyConsume, StaleSqeId, Untranslatable
from .ring import Ring, Sqe
from .shm import AddressSpace, MemoryWindow


@dataclass(frozen=True)
class TranslationEntry:
    """One mapped shared block: enclave range -> proxy range, same size."""
    enclave_base: int
    proxy_base: int
    size: int


@dataclass(frozen=True)
class SqeId:
    """Opaque reservation handle; valid for exactly one submission."""
    seq: int


@dataclass
class SqeArgs:
    fd: int = 0
    addr: int = 0
    len: int = 0
    off: int = 0
    flags: int = 0
    translate: bool = True


class Completion(NamedTuple):
    tag: int
    result: int
    flags: int
    internal_id: int
    opcode: int


def cqe_get_result(c: Completion) -> int:
    return c.result


def cqe_get_data64(c: Completion) -> int:
    return c.tag


@dataclass
class _UserRecord:
    tag: int
    opcode: int
    live: bool = True
    multishot: bool = False
    deliveries: int = 0


@dataclass
class SharedBlock:
    """A host-granted, trusted-validated shared mapping usable for IO buffers."""
    entry: TranslationEntry
    window: MemoryWindow


class RingHandle:
    """Per-enclave hardened view of one SQ/CQ ring pair."""

    def __init__(self, sq: Ring, cq: Ring, space: AddressSpace, kernel,
                 pool, cfg: SimConfig, region_base: int = 1 << 20):
        self._sq = sq
        self._cq = cq
        self._space = space
        self._kernel = kernel
        self.pool = pool
        self._cfg = cfg
        self._drop_budget = cfg.drop_budget
        self._table_cap = cfg.sq_entries * cfg.pending_multiplier
        self._table: OrderedDict[int, _UserRecord] = OrderedDict()
        self._next_internal = 1  # strictly monotonic, never reused
        self._next_seq = 1
        self._pending_slots: OrderedDict[int, Sqe | None] = OrderedDict()
        self._front: Completion | None = None
        self._entries_list: list[TranslationEntry] = []
        self._bases: list[int] = []
        self._region_counter = region_base
        self._parked: deque = deque()
        self.delivered_log: list[tuple[int, int]] = []  # (internal_id, result)

    # --- submission reservation ---

    def try_get_sqe(self) -> SqeId | None:
        """Reserve a submission slot. None when the ring (plus outstanding
        reservations) is at capacity."""
        occ = self._sq.producer_occupancy()
        if occ + len(self._pending_slots) >= self._sq.entries:
            return None
        seq = self._next_seq
        self._next_seq += 1
        self._pending_slots[seq] = None
        return SqeId(seq)

    def prep_and_submit(self, sid: SqeId, opcode: int, args: SqeArgs,
                        caller_tag: int, multishot: bool = False) -> int:
        """Fill a reserved slot and publish.

        The caller tag goes into the private table, never into shared memory;
        the published user_data is a fresh internal id. Returns that id as an
        opaque receipt (usable with retire()). Out-of-order submissions are
        buffered and the tail is published over the contiguous prefix.
        """
        slot = self._pending_slots.get(sid.seq, "missing")
        if slot is not None:
            raise StaleSqeId(f"reservation {sid.seq} not open")
        addr = args.addr
        if args.translate and addr:
            addr = self.translate_addr(addr)
            if args.len > 1:
                end = self.translate_addr(args.addr + args.len - 1)
                if end - addr != args.len - 1:
                    raise Untranslatable("buffer straddles translation entries")
        internal = self._next_internal
        self._next_internal += 1
        self._insert_record(internal, _UserRecord(caller_tag, opcode,
                                                  multishot=multishot))
        flags = args.flags | (ringmod.SQEF_MULTISHOT if multishot else 0)
        self._pending_slots[sid.seq] = Sqe(opcode, flags, args.fd, addr,
                                           args.len, args.off, internal)
        self._publish_ready()
        return internal

    def _publish_ready(self) -> None:
        # publish the maximal contiguous prefix of filled reservations
        while self._pending_slots:
            seq, sqe = next(iter(self._pending_slots.items()))
            if sqe is None:
                break
            if not self._sq.produce(sqe):
                break  # scribbled head can fake fullness; retried on pump
            del self._pending_slots[seq]

    def _insert_record(self, internal: int, rec: _UserRecord) -> None:
        if len(self._table) >= self._table_cap:
            evicted = False
            for key in list(self._table)[:8]:
                if not self._table[key].live:
                    del self._table[key]
                    evicted = True
                    break
            if not evicted:
                # oldest live entry gives way; its eventual completion will
                # be dropped as unknown (host silence already left it stale)
                self._table.popitem(last=False)
        self._table[internal] = rec

    # --- completion side ---

    def peek_cqe(self) -> Completion | None:
        """Deliver the next completion owed to a live internal id.

        The entry is snapshotted in one read and validated against the
        private table; unknown, dead, and duplicate ids are dropped (their
        ring slot consumed) up to the per-call drop budget. A previously
        peeked, unconsumed completion is returned again without touching
        shared memory.
        """
        if self._front is not None:
            return self._front
        drops = 0
        while True:
            raw = self._cq.peek()
            if raw is None:
                return None
            rec = self._table.get(raw.user_data)
            if rec is not None and rec.live:
                comp = Completion(rec.tag, raw.result, raw.flags,
                                  raw.user_data, rec.opcode)
                if not rec.multishot:
                    rec.live = False
                rec.deliveries += 1
                self.delivered_log.append((raw.user_data, raw.result))
                self._front = comp
                return comp
            if drops >= self._drop_budget:
                return None
            self._cq.consume_one()
            drops += 1

    def consume_cqe(self) -> None:
        if self._front is None:
            raise EmptyConsume("consume without a delivered peek")
        self._cq.consume_one()
        self._front = None

    def cq_backlog(self) -> int:
        """Clamped occupancy hint (untrusted; only safe as a loop *continue*
        condition, never as a loop bound)."""
        return self._cq.consumer_occupancy()

    def retire(self, receipt: int) -> None:
        """Tombstone an internal id: later completions for it are dropped.

        Used for sync-call abandonment and multi-shot cancellation.
        """
        rec = self._table.get(receipt)
        if rec is not None:
            rec.live = False

    def retire_tag(self, tag: int) -> None:
        for rec in self._table.values():
            if rec.tag == tag and rec.live:
                rec.live = False
        if self._parked:
            self._parked = deque(p for p in self._parked if p[2] != tag)

    # --- address translation ---

    def insert_translation(self, entry: TranslationEntry) -> None:
        i = bisect.bisect_left(self._bases, entry.enclave_base)
        if i < len(self._entries_list):
            nxt = self._entries_list[i]
            if entry.enclave_base + entry.size > nxt.enclave_base:
                raise Untranslatable("translation entries must stay disjoint")
        if i > 0:
            prev = self._entries_list[i - 1]
            if prev.enclave_base + prev.size > entry.enclave_base:
                raise Untranslatable("translation entries must stay disjoint")
        self._bases.insert(i, entry.enclave_base)
        self._entries_list.insert(i, entry)

    def translation_table(self) -> list[TranslationEntry]:
        return list(self._entries_list)

    def translate_addr(self, enclave_addr: int) -> int:
        i = bisect.bisect_right(self._bases, enclave_addr) - 1
        if i >= 0:
            e = self._entries_list[i]
            if enclave_addr < e.enclave_base + e.size:
                return e.proxy_base + (enclave_addr - e.enclave_base)
        raise Untranslatable(f"{enclave_addr:#x} not in any shared block")

    def deep_translate(self, vec_addr: int, count: int) -> None:
        """Rewrite (addr, len) records in shared memory to proxy addresses.

        All-or-nothing: on any untranslatable record the full array is
        restored from the pre-call snapshot before raising.
        """
        if count < 0 or count > DEEP_TRANSLATE_MAX:
            raise Untranslatable(f"vector length {count} outside [0,{DEEP_TRANSLATE_MAX}]")
        if count == 0:
            return
        win = self._space.access(vec_addr, count * 16, "w")
        snapshot = win.read(0, count * 16)
        import struct
        rec = struct.Struct("<QQ")
        try:
            for i in range(count):
                addr, ln = rec.unpack_from(snapshot, i * 16)
                proxy = self.translate_addr(addr)
                if ln > 1:
                    end = self.translate_addr(addr + ln - 1)
                    if end - proxy != ln - 1:
                        raise Untranslatable("record straddles translation entries")
                win.write(i * 16, rec.pack(proxy, ln))
        except Untranslatable:
            win.write(0, snapshot)
            raise

    # --- mapped-block acquisition (drives the host grant flow) ---

    def fresh_region_id(self) -> int:
        self._region_counter += 1
        return self._region_counter

    def enclave_mmap(self, size: int, region_id: int | None = None):
        """Request a new shared block from the host; promise of SharedBlock.

        Submits the grant request; when the completion carries the proxy base,
        the trusted side attaches the validated registration into the enclave
        space and a translation entry is recorded. Host silence leaves the
        promise pending forever; a trusted-side refusal fails it with
        RegistrationRejected.
        """
        if size <= 0:
            raise ValueError("mmap size must be positive")
        rsize = ((size + PAGE_SIZE - 1) // PAGE_SIZE) * PAGE_SIZE
        if region_id is None:
            region_id = self.fresh_region_id()
        raw = self.pool.create()
        args = SqeArgs(fd=0, addr=0, len=rsize, off=region_id, translate=False)
        self.submit_or_park(ringmod.OP_ENCLAVE_MMAP, args, raw.tag)
        return self.pool.then(raw, self._attach_block, (rsize, region_id))

    def _attach_block(self, bound_args, proxy_base):
        rsize, region_id = bound_args
        if proxy_base < 0:
            raise Untranslatable(f"host refused grant: errno {-proxy_base}")
        enclave_base = self._kernel.attach_shared(self._space, region_id,
                                                  rsize, proxy_base)
        entry = TranslationEntry(enclave_base, proxy_base, rsize)
        self.insert_translation(entry)
        window = self._space.access(enclave_base, rsize, "w")
        return SharedBlock(entry, window)

    # --- parked submissions (ring temporarily full) ---

    def submit_or_park(self, opcode: int, args: SqeArgs, tag: int,
                       multishot: bool = False) -> int | None:
        sid = self.try_get_sqe()
        if sid is None:
            self._parked.append((opcode, args, tag, multishot))
            return None
        return self.prep_and_submit(sid, opcode, args, tag, multishot)

    def pump_parked(self) -> None:
        self._publish_ready()
        for _ in range(len(self._parked)):
            opcode, args, tag, multishot = self._parked.popleft()
            sid = self.try_get_sqe()
            if sid is None:
                self._parked.appendleft((opcode, args, tag, multishot))
                break
            self.prep_and_submit(sid, opcode, args, tag, multishot)

    @property
    def parked_count(self) -> int:
        return len(self._parked)
