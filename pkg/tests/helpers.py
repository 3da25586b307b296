"""Shared fixtures: tiny world builders and a brute-force scheduler reference.

Everything here is deliberately dumb. The reference scheduler advances one
nanosecond at a time and re-derives every decision from scratch so that the
event-driven implementation has something slow-but-obviously-right to match.
"""
from __future__ import annotations

from ringsim.config import PAGE_SIZE, SimConfig
from ringsim.enclave import RingHandle, SharedBlock, TranslationEntry
from ringsim.promise import PromisePool
from ringsim.ring import (CQE_SIZE, SQE_SIZE, cq_ring_attach, cq_ring_init,
                          ring_region_bytes, sq_ring_attach, sq_ring_init)
from ringsim.shm import NORMAL, TRUSTED, MemoryAuthority
from ringsim.sim import Simulation


def pages_for(nbytes: int) -> int:
    return (nbytes + PAGE_SIZE - 1) // PAGE_SIZE


def dual_windows(auth: MemoryAuthority, espace, pspace, nbytes: int,
                 owner: str = "proxy"):
    """One set of normal-world pages mapped into both spaces; returns the
    (enclave_window, proxy_window, page_ids) triple."""
    pages = auth.alloc_pages(pages_for(nbytes), owner, NORMAL, "shared")
    me = auth.map_private(espace, pages)
    mp = auth.map_private(pspace, pages)
    return (espace.access(me.base, nbytes, "rw"),
            pspace.access(mp.base, nbytes, "rw"), pages)


def ring_world(cfg: SimConfig | None = None):
    """RingHandle wired to host-side ring views, no scheduler, no host model.

    Returns (auth, handle, host_sq, host_cq) where host_sq consumes
    submissions and host_cq produces completions, exactly like the host OS
    would through its own mapping of the same pages.
    """
    cfg = cfg or SimConfig()
    auth = MemoryAuthority()
    espace = auth.create_space("encl", TRUSTED, base_hint=0x100000)
    pspace = auth.create_space("proxy", NORMAL, base_hint=0x10000)
    sq_bytes = ring_region_bytes(cfg.sq_entries, SQE_SIZE)
    cq_bytes = ring_region_bytes(cfg.cq_entries, CQE_SIZE)
    sqw_e, sqw_p, _ = dual_windows(auth, espace, pspace, sq_bytes)
    cqw_e, cqw_p, _ = dual_windows(auth, espace, pspace, cq_bytes)
    sq = sq_ring_init(sqw_e, cfg.sq_entries)
    cq = cq_ring_init(cqw_e, cfg.cq_entries)
    host_sq = sq_ring_attach(sqw_p, cfg.sq_entries)
    host_cq = cq_ring_attach(cqw_p, cfg.cq_entries)
    pool = PromisePool(cfg.max_outstanding_promises, cfg.continuation_budget)
    handle = RingHandle(sq, cq, espace, None, pool, cfg)
    return auth, handle, host_sq, host_cq


class FakeHandle:
    """Stands in for RingHandle where only mmap grants and the pool matter.

    enclave_mmap() returns a pending promise and queues the request; tests
    settle requests explicitly with grant()/refuse() to script host behavior.
    """

    def __init__(self, pool: PromisePool | None = None):
        self.pool = pool or PromisePool()
        self.requests: list[tuple[int, object]] = []
        self._auth = MemoryAuthority()
        self._espace = self._auth.create_space("encl", TRUSTED, 0x100000)
        self._next_base = 0x40000000

    def enclave_mmap(self, size: int):
        p = self.pool.create()
        self.requests.append((size, p))
        return p

    def make_block(self, size: int) -> SharedBlock:
        pages = self._auth.alloc_pages(pages_for(size), "encl", NORMAL, "grant")
        m = self._auth.map_private(self._espace, pages)
        win = self._espace.access(m.base, size, "rw")
        proxy_base = self._next_base
        self._next_base += size + PAGE_SIZE
        return SharedBlock(TranslationEntry(m.base, proxy_base, size), win)

    def grant(self, index: int = 0) -> SharedBlock:
        size, p = self.requests.pop(index)
        block = self.make_block(size)
        self.pool.fulfill(p, block)
        self.pool.run_deferred()
        return block

    def refuse(self, index: int = 0, errno: int = 12):
        _, p = self.requests.pop(index)
        self.pool.fail(p, errno)
        self.pool.run_deferred()


class FakeRT:
    """Duck-typed runtime for promise-layer tests: records submissions and
    lets the test fulfil them by hand."""

    def __init__(self):
        self.pool = PromisePool()
        self.submitted: list[tuple] = []
        self.cfg = SimConfig()
        self._now = 0

    def submit_async(self, opcode, args, multishot=False, handler=None):
        p = self.pool.create()
        self.submitted.append((opcode, args, p))
        return p

    def pump(self, max_events=None):
        self.pool.run_deferred()
        return 0

    def now(self):
        return self._now


def app_sim(manifest: str = "", policy=None, cfg: SimConfig | None = None,
            seed: int = 0, sched_policy: str = "fp"):
    """Simulation with the standard host task already admitted."""
    sim = Simulation(cfg=cfg or SimConfig(), seed=seed, manifest=manifest,
                     policy=policy, sched_policy=sched_policy)
    sim.add_host_task()
    return sim


def spawn_app(sim, body_of, env=None, name="app", period=100_000,
              budget=50_000, priority=5):
    """Spawn an enclave whose body is `body_of(rt, out)`; returns (rt, out).

    out is a plain dict the body can fill with observations.
    """
    out: dict = {}

    def factory(rt):
        def body():
            yield from body_of(rt, out)
        return body()

    rt = sim.spawn_enclave(name, period, budget, factory, env=env,
                           priority=priority)
    return rt, out


# --- brute-force scheduler reference ---

class RefTask:
    def __init__(self, tid, name, kind, period, budget, priority, script):
        self.tid = tid
        self.name = name
        self.kind = kind
        self.period = period
        self.budget = budget
        self.priority = priority
        self.script = list(script)
        self.ip = 0
        self.remaining = budget
        self.next_replenish = period
        self.deadline = period
        self.yielded = False
        self.alive = True
        self.cmd_left = None
        self.executed_total = 0
        self.window_executed = 0


class RefSched:
    """Tick-at-a-time reference. Scripts are finite lists of scheduling
    commands; running off the end exits the task."""

    def __init__(self, policy: str):
        assert policy in ("fp", "edf")
        self.policy = policy
        self.now = 0
        self.tasks: list[RefTask] = []
        self.trace: list[tuple[int, str, str]] = []
        self.ticks: list[tuple[int, str]] = []
        self._running: RefTask | None = None

    def admit(self, name, kind, period, budget, script, priority=0):
        t = RefTask(len(self.tasks), name, kind, period, budget, priority,
                    script)
        self.tasks.append(t)
        return t

    def _replenish(self):
        for t in self.tasks:
            if t.alive and t.next_replenish <= self.now:
                t.remaining = t.budget
                t.yielded = False
                t.window_executed = 0
                t.deadline = t.next_replenish + t.period
                t.next_replenish += t.period
                self.trace.append((self.now, t.name, "replenish"))

    def _pick(self):
        best, best_key = None, None
        for t in self.tasks:
            if not (t.alive and not t.yielded and t.remaining > 0):
                continue
            key = (-t.priority, t.tid) if self.policy == "fp" \
                else (t.deadline, t.tid)
            if best_key is None or key < best_key:
                best, best_key = t, key
        return best

    def _set_running(self, t):
        if self._running is t:
            return
        if self._running is not None:
            self.trace.append((self.now, self._running.name, "preempt"))
        self._running = t
        if t is not None:
            self.trace.append((self.now, t.name, "dispatch"))

    def _ensure_command(self, t) -> bool:
        while t.cmd_left is None or t.cmd_left == 0:
            if t.ip >= len(t.script):
                self._running = None
                t.alive = False
                self.trace.append((self.now, t.name, "exit"))
                return False
            cmd = t.script[t.ip]
            t.ip += 1
            if cmd[0] == "compute":
                t.cmd_left = cmd[1]
            else:  # yield
                t.yielded = True
                t.cmd_left = None
                self.trace.append((self.now, t.name, "yield"))
                self._running = None
                return False
        return True

    def run_until(self, t_end: int):
        while self.now < t_end:
            self._replenish()
            task = self._pick()
            if task is None:
                self._set_running(None)
                self.now += 1
                continue
            self._set_running(task)
            if not self._ensure_command(task):
                continue
            self.ticks.append((self.now, task.name))
            self.now += 1
            task.remaining -= 1
            task.cmd_left -= 1
            task.executed_total += 1
            task.window_executed += 1
            if task.remaining == 0:
                self.trace.append((self.now, task.name, "exhaust"))
                self._running = None


def script_gen(script):
    """Turn a command list into a generator body for the real scheduler."""
    def body():
        for cmd in script:
            yield cmd
    return body()


def expand_timeline(timeline):
    """(start, end, name) slices -> set of (tick, name)."""
    out = set()
    for s, e, name in timeline:
        for t in range(s, e):
            out.add((t, name))
    return out
