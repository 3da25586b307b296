"""Whole-platform assembly: trusted kernel glue, enclave runtimes, scheduler.

A Simulation owns one memory authority, one untrusted host task, one trusted
serial device, and any number of enclave tasks. Spawning an enclave walks the
full launch flow: private image pages, ring-region grant validation, ring
construction on both sides, pool prefill from the launch environment, and
scheduler admission (optionally funded by a donor task's budget and page
quota).
"""
from __future__ import annotations

import struct
from typing import Callable

from .arena import ArenaPool
from .config import PAGE_SIZE, SimConfig
from .device import SecureSerialDevice
from .enclave import RingHandle
from .errors import RegistrationRejected
from .host import AdversaryPolicy, HostOs, VirtualFs
from .promise import PromisePool
from .ring import (CQE_SIZE, SQE_SIZE, cq_ring_attach, cq_ring_init,
                   ring_region_bytes, sq_ring_attach, sq_ring_init)
from .sched import ENCLAVE, FP, HOST, BudgetScheduler
from .shm import MemoryAuthority, NORMAL, TRUSTED

_WAKE_FMT = struct.Struct("<II")


class TrustedKernel:
    """Trusted-world mediator between enclaves, the authority, and the host.

    It validates every grant an enclave wants to attach, maps ring regions,
    and forwards enter notifications to the host as a masked wake interrupt
    plus a record in the shared wake queue page.
    """

    def __init__(self, authority: MemoryAuthority, cfg: SimConfig):
        self.authority = authority
        self.cfg = cfg
        self.host: HostOs | None = None
        self.max_regions_per_owner = 128
        self._regions_by_owner: dict[str, int] = {}
        self._wake_window = None
        self._wake_count = 0
        self._caller_ordinals: dict[str, int] = {}

    def wire_host(self, host: HostOs) -> None:
        self.host = host
        pages = self.authority.alloc_pages(1, "kernel", NORMAL, "wakequeue")
        kspace = self.authority.create_space("kernel", TRUSTED, base_hint=0x8000)
        m = self.authority.map_private(kspace, pages)
        self._wake_window = kspace.access(m.base, PAGE_SIZE, "w")
        hm = self.authority.map_private(host.proxy_space, pages, perms="r")
        host.wake_window = host.proxy_space.access(hm.base, PAGE_SIZE, "r")

    def ring_enter(self, caller: str) -> None:
        """Trusted syscall surface for "work is queued": append to the wake
        queue and raise the (masked) host interrupt."""
        if self.host is None:
            return
        ordinal = self._caller_ordinals.setdefault(caller,
                                                   len(self._caller_ordinals))
        self._wake_count = (self._wake_count + 1) & 0xFFFFFFFF
        self._wake_window.write(0, _WAKE_FMT.pack(self._wake_count, ordinal))
        self.host.notify_enter()

    def attach_shared(self, space, region_id: int, rsize: int,
                      proxy_base: int) -> int:
        """Map a host-registered grant into an enclave space.

        The registration must exist, be in a mappable state, and match the
        size the enclave asked for; otherwise the attach is refused and
        nothing changes. The proxy base is recorded by the caller for
        submission-time translation but is never trusted for validation:
        a host lying about its own mapping only corrupts its own view.
        """
        reg = self.authority.registrations.get(region_id)
        if reg is None:
            raise RegistrationRejected(f"region {region_id} was never validated")
        if reg.expected_size != rsize:
            raise RegistrationRejected(
                f"region {region_id} is {reg.expected_size} bytes, wanted {rsize}")
        owner = space.owner
        if self._regions_by_owner.get(owner, 0) >= self.max_regions_per_owner:
            raise RegistrationRejected(f"{owner} at region cap")
        mapping = self.authority.map_region(space, region_id)
        self._regions_by_owner[owner] = self._regions_by_owner.get(owner, 0) + 1
        return mapping.base


class EnclaveRuntime:
    """Event-loop facade handed to enclave task bodies.

    Owns the hardened ring handle, the promise pool, and the arena pool for
    one enclave. pump() is the only place completions are drained, so a task
    controls exactly when untrusted data enters.
    """

    def __init__(self, name: str, handle: RingHandle, pool: PromisePool,
                 arena_pool: ArenaPool, sched: BudgetScheduler,
                 kernel: TrustedKernel, cfg: SimConfig,
                 device: SecureSerialDevice):
        self.name = name
        self.handle = handle
        self.pool = pool
        self.arena_pool = arena_pool
        self.cfg = cfg
        self.device = device
        self._sched = sched
        self._kernel = kernel
        self.multishot_handlers: dict[int, Callable] = {}
        self.detections = 0  # app-level integrity check failures

    def now(self) -> int:
        return self._sched.now

    def submit_async(self, opcode: int, args, multishot: bool = False,
                     handler: Callable | None = None):
        """Queue one submission; promise of its (first) completion result."""
        p = self.pool.create()
        if multishot and handler is not None:
            self.multishot_handlers[p.tag] = handler
        self.handle.submit_or_park(opcode, args, p.tag, multishot)
        self._kernel.ring_enter(self.name)
        return p

    def pump(self, max_events: int | None = None) -> int:
        """Drain up to max_events completion deliveries plus deferred work.

        A peek that comes back empty only ends the loop when the ring itself
        reports empty; a junk-flooded ring burns event slots (each covering a
        full drop budget) instead, so one pump call stays bounded while a
        backlog of garbage still drains across calls.
        """
        self.handle.pump_parked()
        budget = self.cfg.max_events if max_events is None else max_events
        n = 0
        while n < budget:
            comp = self.handle.peek_cqe()
            if comp is None:
                if self.handle.cq_backlog() == 0:
                    break
                n += 1  # a drop-budget round of junk is still an event
                continue
            self.handle.consume_cqe()
            n += 1
            h = self.multishot_handlers.get(comp.tag)
            if h is not None:
                h(comp)
                if comp.tag in self.pool._by_tag:
                    self.pool.settle_from_cqe(comp)
            else:
                self.pool.settle_from_cqe(comp)
        self.pool.run_deferred()
        return n

    def device_tx(self, payload: bytes) -> None:
        self.device.tx(self._sched.now, self.name, payload)


class Simulation:
    """One platform: authority + kernel + host + device + scheduler."""

    def __init__(self, cfg: SimConfig | None = None, seed: int = 0,
                 manifest: str = "", policy: AdversaryPolicy | None = None,
                 sched_policy: str = FP):
        self.cfg = cfg or SimConfig()
        self.seed = seed
        self.authority = MemoryAuthority()
        self.authority.table.set_quota("proxy", 8192)
        self.authority.table.set_quota("kernel", 16)
        self.kernel = TrustedKernel(self.authority, self.cfg)
        self.device = SecureSerialDevice(tx_capacity=1 << 20)
        self.sched = BudgetScheduler(sched_policy)
        self.vfs = VirtualFs.from_manifest(manifest) if manifest else VirtualFs()
        self.policy = policy or AdversaryPolicy()
        proxy_space = self.authority.create_space("proxy", NORMAL,
                                                  base_hint=0x10000)
        self.host = HostOs(self.authority, proxy_space, self.vfs, self.policy,
                           self.cfg, seed)
        self.kernel.wire_host(self.host)
        self.runtimes: dict[str, EnclaveRuntime] = {}
        self._next_rid = 1

    # --- host task ---

    def add_host_task(self, period: int = 100_000, budget: int = 50_000,
                      priority: int = 0) -> None:
        self.sched.admit("host0", HOST, period, budget, self._host_body(),
                         priority)

    def _host_body(self):
        while True:
            yield ("compute", self.cfg.host_step_cost)
            served = self.host.on_slice(self.sched.now)
            if served == 0 and not self.host.workers:
                yield ("yield",)

    # --- enclave launch flow ---

    def _fresh_rid(self) -> int:
        rid = self._next_rid
        self._next_rid += 1
        return rid

    def spawn_enclave(self, name: str, period: int, budget: int,
                      body_factory: Callable, env: dict | None = None,
                      priority: int = 0, mem_quota_pages: int = 512,
                      donor: str | None = None, budget_share: int = 0,
                      quota_share_pages: int = 0) -> EnclaveRuntime:
        """Full launch: image pages, ring grants, pools, admission.

        body_factory(runtime) must return the task body generator. Grant
        validation failures surface as RegistrationRejected and leave the
        authority untouched.
        """
        cfg = self.cfg
        if donor is not None and quota_share_pages:
            self.authority.table.transfer_quota(donor, name, quota_share_pages)
        else:
            self.authority.table.set_quota(name, mem_quota_pages)
        space = self.authority.create_space(name, TRUSTED, base_hint=0x100000)
        image = self.authority.alloc_pages(4, name, TRUSTED, "image")
        self.authority.map_private(space, image)

        # ring regions: proxy-owned normal pages, validated before any map
        sq_bytes = ring_region_bytes(cfg.sq_entries, SQE_SIZE)
        cq_bytes = ring_region_bytes(cfg.cq_entries, CQE_SIZE)
        sq_pages = self.authority.alloc_pages(sq_bytes // PAGE_SIZE, "proxy",
                                              NORMAL, "ring")
        cq_pages = self.authority.alloc_pages(cq_bytes // PAGE_SIZE, "proxy",
                                              NORMAL, "ring")
        sq_rid, cq_rid = self._fresh_rid(), self._fresh_rid()
        self.authority.register_shared(sq_pages, sq_rid, sq_bytes)
        self.authority.register_shared(cq_pages, cq_rid, cq_bytes)

        sq_base = self.kernel.attach_shared(space, sq_rid, sq_bytes, 0)
        cq_base = self.kernel.attach_shared(space, cq_rid, cq_bytes, 0)
        sq_win = space.access(sq_base, sq_bytes, "w")
        cq_win = space.access(cq_base, cq_bytes, "w")
        # trusted side zeroes both headers; a pre-scribbled header can then
        # never poison the initial index snapshots on either side
        sq = sq_ring_init(sq_win, cfg.sq_entries)
        cq = cq_ring_init(cq_win, cfg.cq_entries)

        psq = self.authority.map_region(self.host.proxy_space, sq_rid)
        pcq = self.authority.map_region(self.host.proxy_space, cq_rid)
        sq_host_win = self.host.proxy_space.access(psq.base, sq_bytes, "w")
        cq_host_win = self.host.proxy_space.access(pcq.base, cq_bytes, "w")
        host_sq = sq_ring_attach(sq_host_win, cfg.sq_entries)
        host_cq = cq_ring_attach(cq_host_win, cfg.cq_entries)
        self.host.attach_enclave(name, host_sq, host_cq)
        self.host.scribble_targets.extend([sq_host_win, cq_host_win])

        pool = PromisePool(cfg.max_outstanding_promises,
                           cfg.continuation_budget)
        # per-enclave grant id space keeps host registrations collision-free
        handle = RingHandle(sq, cq, space, self.kernel, pool, cfg,
                            region_base=(len(self.runtimes) + 1) << 20)
        rt = EnclaveRuntime(name, handle, pool, ArenaPool(handle, cfg),
                            self.sched, self.kernel, cfg, self.device)
        body = body_factory(rt)
        if donor is not None:
            self.sched.donate(donor, name, ENCLAVE, period, budget, body,
                              budget_share, quota_share_pages, priority)
        else:
            self.sched.admit(name, ENCLAVE, period, budget, body, priority)
        rt.arena_pool.prefill(env or {})
        self.kernel.ring_enter(name)
        self.runtimes[name] = rt
        return rt

    # --- driving ---

    def run_until(self, t: int) -> None:
        self.sched.run_until(t)

    def run_for(self, dt: int) -> None:
        self.sched.advance(dt)
