"""Untrusted host model: SQ poller, worker pool, virtual fs, adversary hooks.

The host consumes submission entries, services them against an in-memory
filesystem and socket table with seeded deterministic latency, and produces
completions. Every behavior the availability/integrity games need from a
hostile kernel is a policy transform applied between consuming a submission
and delivering its completion: deny, delay, corrupt, duplicate, flood, plus
the global kill_proxy / ring scribbling / refuse-to-wake actions.

Nothing here is trusted: the enclave-side modules never read host state
except through the shared rings and granted windows.
"""
from __future__ import annotations

import hashlib
import heapq
import random
import struct
from collections import deque
from dataclasses import dataclass, field

from . import ring as ringmod
from .config import (EAGAIN, EBADF, EEXIST, EFAULT, EINVAL, ENOENT, ENOMEM,
                     PAGE_SIZE, SimConfig)
from .errors import BusFault, OutOfMemory, QuotaExceeded, RegistrationError
from .ring import Cqe, Sqe
from .shm import NORMAL, AddressSpace, MemoryAuthority

EIO = 5

_WAKE_FMT = struct.Struct("<II")  # free-running post count, last caller ordinal


# --- virtual filesystem ---

@dataclass
class VFile:
    data: bytearray
    block_size: int = 4096
    pseudo: bool = False


def _fill_bytes(path: str, size: int) -> bytearray:
    """Deterministic content for manifest-seeded files."""
    if size == 0:
        return bytearray()
    block = hashlib.sha256(path.encode()).digest()
    reps = (size + len(block) - 1) // len(block)
    return bytearray((block * reps)[:size])


class VirtualFs:
    """Path-keyed in-memory tree with per-file block size and pseudo flag."""

    def __init__(self) -> None:
        self.files: dict[str, VFile] = {}
        self.dirs: set[str] = {"/"}

    @classmethod
    def from_manifest(cls, text: str) -> "VirtualFs":
        """Build from a directory-manifest: one entry per line,
        `path size block_size pseudo`; a trailing slash declares a directory.
        Blank lines and #-comments are skipped."""
        fs = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            path = parts[0]
            if path.endswith("/"):
                fs.mkdir(path.rstrip("/") or "/")
                continue
            if len(parts) != 4:
                raise ValueError(f"manifest line {lineno}: want `path size block pseudo`")
            size, block, pseudo = int(parts[1]), int(parts[2]), int(parts[3])
            fs._ensure_parents(path)
            fs.files[path] = VFile(_fill_bytes(path, size), block, bool(pseudo))
        return fs

    def _ensure_parents(self, path: str) -> None:
        parts = path.split("/")[1:-1]
        cur = ""
        for p in parts:
            cur += "/" + p
            self.dirs.add(cur)

    def mkdir(self, path: str) -> int:
        if path in self.dirs:
            return -EEXIST
        parent = path.rsplit("/", 1)[0] or "/"
        if parent not in self.dirs:
            return -ENOENT
        self.dirs.add(path)
        return 0

    def open(self, path: str, create: bool, trunc: bool) -> int:
        f = self.files.get(path)
        if f is None:
            if not create:
                return -ENOENT
            parent = path.rsplit("/", 1)[0] or "/"
            if parent not in self.dirs:
                return -ENOENT
            pseudo = path.startswith("/dev/") or path.startswith("/proc/")
            self.files[path] = VFile(bytearray(), 4096, pseudo)
        elif trunc and not f.pseudo:
            f.data = bytearray()
        return 0

    def read(self, path: str, off: int, n: int) -> bytes:
        f = self.files[path]
        if f.pseudo:
            # pseudo devices hand back a rolling deterministic pattern
            block = hashlib.sha256(f"{path}:{off}".encode()).digest()
            reps = (n + len(block) - 1) // len(block)
            return (block * reps)[:n]
        return bytes(f.data[off:off + n])

    def write(self, path: str, off: int, data: bytes) -> int:
        f = self.files[path]
        if f.pseudo:
            return len(data)  # swallowed, like a bit bucket
        if off > len(f.data):
            f.data.extend(b"\x00" * (off - len(f.data)))
        f.data[off:off + len(data)] = data
        return len(data)

    def unlink(self, path: str) -> int:
        if path not in self.files:
            return -ENOENT
        del self.files[path]
        return 0

    def stat(self, path: str) -> tuple[int, int, int]:
        f = self.files[path]
        return (len(f.data), f.block_size, 1 if f.pseudo else 0)


# --- sockets ---

@dataclass
class _Sock:
    kind: str = "plain"  # plain | listener | conn
    port: int = 0
    backlog: deque = field(default_factory=deque)  # queued (peer, payload)
    rx: bytearray = field(default_factory=bytearray)
    tx: bytearray = field(default_factory=bytearray)
    armed_accept: tuple | None = None  # (enclave_id, user_data) multishot


class SocketTable:
    def __init__(self) -> None:
        self.socks: dict[int, _Sock] = {}
        self.listeners: dict[int, int] = {}
        self._next = 1

    def new_sock(self) -> int:
        sid = self._next
        self._next += 1
        self.socks[sid] = _Sock()
        return sid


# --- adversary policy ---

HONEST = ("honest",)


@dataclass
class AdversaryPolicy:
    """Per-op completion transforms plus global hostile actions.

    The transform chosen for an operation is a pure function of the op name,
    the simulated time, and the seeded stream owned by the host, so identical
    scenarios replay identically.
    """

    per_op: dict[str, tuple] = field(default_factory=dict)
    default: tuple = HONEST
    never_wake: bool = False
    kill_proxy_at: int = -1
    scribble_rate: float = 0.0
    bad_register: str = ""  # "", "dup", "overlap", "size"

    def transform_for(self, op_name: str, now: int, rng: random.Random) -> tuple:
        return self.per_op.get(op_name, self.default)

    @staticmethod
    def parse_transform(text: str) -> tuple:
        """`honest|deny|corrupt|duplicate|delay:NS|flood:N`"""
        if ":" in text:
            kind, arg = text.split(":", 1)
            if kind == "delay":
                return ("delay", int(arg))
            if kind == "flood":
                return ("flood", int(arg))
            raise ValueError(f"unknown transform {text}")
        if text not in ("honest", "deny", "corrupt", "duplicate"):
            raise ValueError(f"unknown transform {text}")
        return (text,)


# --- the host itself ---

class HostOs:
    def __init__(self, authority: MemoryAuthority, proxy_space: AddressSpace,
                 vfs: VirtualFs, policy: AdversaryPolicy, cfg: SimConfig,
                 seed: int, name: str = "host0"):
        self.authority = authority
        self.proxy_space = proxy_space
        self.vfs = vfs
        self.policy = policy
        self.cfg = cfg
        self.rng = random.Random(seed)
        self.name = name
        self.pid = 1000
        self.rings: dict[str, tuple] = {}  # enclave -> (sq consumer, cq producer)
        self.fds: dict[int, tuple] = {}    # fd -> ("file", path) | ("sock", sid)
        self.sockets = SocketTable()
        self.workers: list = []            # heap of (ready, seq, fn)
        self._wseq = 0
        # a host that never forwards wakes leaves its poller parked from boot
        self.poller_awake = not policy.never_wake
        self.idle_deadline = cfg.poller_idle_timeout
        self.pending_wake = False
        self.proxy_alive = True
        self.cq_drops = 0
        self.serviced = 0
        self.events: list[tuple] = []
        self.wake_window = None            # reader view of the wake region
        self._wake_seen = 0
        self.scribble_targets: list = []   # proxy-side windows of shared regions

    # --- wiring ---

    def attach_enclave(self, enclave_id: str, sq_consumer, cq_producer) -> None:
        self.rings[enclave_id] = (sq_consumer, cq_producer)

    def notify_enter(self) -> None:
        """Wake interrupt from the trusted side; stays masked until the host
        is next scheduled (handled at the top of its slice)."""
        self.pending_wake = True

    # --- descriptor table ---

    def _alloc_fd(self, entry: tuple) -> int:
        fd = 3
        while fd in self.fds:
            fd += 1
        self.fds[fd] = entry
        return fd

    # --- slice body ---

    def on_slice(self, now: int) -> int:
        """One host scheduling step: interrupts, due completions, SQ poll."""
        if self.policy.kill_proxy_at >= 0 and now >= self.policy.kill_proxy_at \
                and self.proxy_alive:
            self._kill_proxy(now)
        if self.pending_wake:
            self.pending_wake = False
            if not self.policy.never_wake and self.proxy_alive:
                self._drain_wake_region()
                if not self.poller_awake:
                    self.events.append(("poller_wake", now))
                self.poller_awake = True
                self.idle_deadline = now + self.cfg.poller_idle_timeout
        served = self._deliver_due(now)
        if self.poller_awake and self.proxy_alive:
            served += self._poll_rings(now)
        if self.policy.scribble_rate > 0:
            self._scribble(now)
        return served

    def _drain_wake_region(self) -> None:
        if self.wake_window is not None:
            count, _ = _WAKE_FMT.unpack(self.wake_window.read(0, _WAKE_FMT.size))
            self._wake_seen = count

    def _deliver_due(self, now: int) -> int:
        n = 0
        while self.workers and self.workers[0][0] <= now:
            _, _, fn = heapq.heappop(self.workers)
            if self.proxy_alive:
                fn(now)
                n += 1
        return n

    def _poll_rings(self, now: int) -> int:
        total = 0
        for eid, (sq, _cq) in self.rings.items():
            batch = sq.consume_batch(self.cfg.host_batch)
            for sqe in batch:
                self._service(eid, sqe, now)
            total += len(batch)
        if total:
            self.idle_deadline = now + self.cfg.poller_idle_timeout
        elif now >= self.idle_deadline and self.poller_awake:
            self.poller_awake = False
            self.events.append(("poller_sleep", now))
        return total

    def _scribble(self, now: int) -> None:
        rate = self.policy.scribble_rate
        for win in self.scribble_targets:
            if self.rng.random() < rate:
                off = self.rng.randrange(win.length)
                n = min(self.rng.randrange(1, 9), win.length - off)
                win.write(off, bytes(self.rng.getrandbits(8) for _ in range(n)))

    def _kill_proxy(self, now: int) -> None:
        # descriptor table torn down; granted pages stay mapped
        self.proxy_alive = False
        self.poller_awake = False
        self.fds.clear()
        self.workers.clear()
        self.events.append(("kill_proxy", now))

    # --- servicing ---

    def _latency(self, nbytes: int = 0) -> int:
        jitter = self.rng.randrange(self.cfg.service_jitter) \
            if self.cfg.service_jitter else 0
        return self.cfg.service_base + jitter + self.cfg.service_per_byte * nbytes

    def _schedule(self, ready: int, fn) -> None:
        heapq.heappush(self.workers, (ready, self._wseq, fn))
        self._wseq += 1

    def _produce_cqe(self, eid: str, cqe: Cqe, note: tuple | None = None) -> bool:
        _sq, cq = self.rings[eid]
        if cq.produce(cqe):
            self.events.append(("cqe", eid, cqe.user_data, cqe.result)
                               if note is None else note)
            return True
        self.cq_drops += 1
        self.events.append(("cqe_dropped", eid, cqe.user_data))
        return False

    def _read_proxy(self, addr: int, n: int) -> bytes | None:
        try:
            return self.proxy_space.access(addr, n, "r").read(0, n)
        except BusFault:
            return None

    def _write_proxy(self, addr: int, data: bytes) -> bool:
        try:
            self.proxy_space.access(addr, len(data), "w").write(0, data)
            return True
        except BusFault:
            return False

    def _service(self, eid: str, sqe: Sqe, now: int) -> None:
        self.serviced += 1
        name = ringmod.OP_NAMES.get(sqe.opcode, "invalid")
        tf = self.policy.transform_for(name, now, self.rng)
        self.events.append(("sqe", now, eid, name, sqe.user_data))
        if tf[0] == "deny":
            self.events.append(("deny", now, name, sqe.user_data))
            return
        delay = tf[1] if tf[0] == "delay" else 0
        corrupt = tf[0] == "corrupt"
        duplicate = tf[0] == "duplicate"
        flood = tf[1] if tf[0] == "flood" else 0
        ready = now + self._latency(sqe.len) + delay
        fn = self._build_completion(eid, sqe, corrupt)
        self._schedule(ready, fn)
        if duplicate:
            self._schedule(ready + 1, fn)
        for i in range(flood):
            junk = Cqe((1 << 63) | self.rng.getrandbits(62),
                       self.rng.randrange(-100, 100), 0)
            self._schedule(ready + i, lambda t, c=junk: self._produce_cqe(eid, c))

    def _build_completion(self, eid: str, sqe: Sqe, corrupt: bool):
        """Compute the op now; apply byte effects and CQE at delivery time."""

        def deliver(now: int) -> None:
            result, payload_addr, payload = self._execute(eid, sqe, now)
            tampered = False
            if corrupt:
                tampered = True
                if payload is not None:
                    payload = bytes(b ^ 0xA5 for b in payload)
                else:
                    result = -EIO if result >= 0 else result
            if payload_addr is not None and payload is not None:
                if not self._write_proxy(payload_addr, payload):
                    result = -EFAULT
                    payload = None
            cqe = Cqe(sqe.user_data, result, 0)
            note = None
            if sqe.opcode == ringmod.OP_READ and payload is not None:
                path = self._fd_path(sqe.fd)
                note = ("read_payload", now, eid, sqe.user_data, path,
                        not tampered, sqe.off, len(payload), result)
            self._produce_cqe(eid, cqe, note)

        return deliver

    def _fd_path(self, fd: int):
        entry = self.fds.get(fd)
        return entry[1] if entry and entry[0] == "file" else None

    def _execute(self, eid: str, sqe: Sqe, now: int):
        """-> (result, payload_addr | None, payload | None)"""
        op = sqe.opcode
        if op == ringmod.OP_OPEN:
            path = self._read_proxy(sqe.addr, sqe.len)
            if path is None:
                return (-EFAULT, None, None)
            try:
                text = path.decode()
            except UnicodeDecodeError:
                return (-EINVAL, None, None)
            r = self.vfs.open(text, bool(sqe.off & ringmod.OPENF_CREATE),
                              bool(sqe.off & ringmod.OPENF_TRUNC))
            if r < 0:
                return (r, None, None)
            return (self._alloc_fd(("file", text)), None, None)
        if op == ringmod.OP_READ:
            entry = self.fds.get(sqe.fd)
            if entry is None:
                return (-EBADF, None, None)
            if entry[0] == "file":
                data = self.vfs.read(entry[1], sqe.off, sqe.len)
                return (len(data), sqe.addr, data)
            sock = self.sockets.socks[entry[1]]
            data = bytes(sock.rx[:sqe.len])
            del sock.rx[:len(data)]
            return (len(data), sqe.addr, data)
        if op == ringmod.OP_WRITE:
            entry = self.fds.get(sqe.fd)
            if entry is None:
                return (-EBADF, None, None)
            data = self._read_proxy(sqe.addr, sqe.len)
            if data is None:
                return (-EFAULT, None, None)
            if entry[0] == "file":
                return (self.vfs.write(entry[1], sqe.off, data), None, None)
            sock = self.sockets.socks[entry[1]]
            sock.tx += data
            return (len(data), None, None)
        if op == ringmod.OP_CLOSE:
            if sqe.fd not in self.fds:
                return (-EBADF, None, None)
            del self.fds[sqe.fd]
            return (0, None, None)
        if op == ringmod.OP_STATX:
            entry = self.fds.get(sqe.fd)
            if entry is None or entry[0] != "file":
                return (-EBADF, None, None)
            size, block, pseudo = self.vfs.stat(entry[1])
            return (0, sqe.addr, ringmod.STATX_FMT.pack(size, block, pseudo))
        if op == ringmod.OP_UNLINK:
            path = self._read_proxy(sqe.addr, sqe.len)
            if path is None:
                return (-EFAULT, None, None)
            return (self.vfs.unlink(path.decode()), None, None)
        if op == ringmod.OP_MKDIR:
            path = self._read_proxy(sqe.addr, sqe.len)
            if path is None:
                return (-EFAULT, None, None)
            return (self.vfs.mkdir(path.decode()), None, None)
        if op == ringmod.OP_SYNC:
            return (0 if sqe.fd in self.fds else -EBADF, None, None)
        if op == ringmod.OP_SOCKET:
            sid = self.sockets.new_sock()
            return (self._alloc_fd(("sock", sid)), None, None)
        if op == ringmod.OP_BIND:
            entry = self.fds.get(sqe.fd)
            if entry is None or entry[0] != "sock":
                return (-EBADF, None, None)
            port = sqe.off
            if port in self.sockets.listeners:
                return (-EEXIST, None, None)
            sock = self.sockets.socks[entry[1]]
            sock.port = port
            self.sockets.listeners[port] = entry[1]
            return (0, None, None)
        if op == ringmod.OP_LISTEN:
            entry = self.fds.get(sqe.fd)
            if entry is None or entry[0] != "sock":
                return (-EBADF, None, None)
            self.sockets.socks[entry[1]].kind = "listener"
            return (0, None, None)
        if op == ringmod.OP_ACCEPT:
            entry = self.fds.get(sqe.fd)
            if entry is None or entry[0] != "sock":
                return (-EBADF, None, None)
            sock = self.sockets.socks[entry[1]]
            if sqe.flags & ringmod.SQEF_MULTISHOT:
                sock.armed_accept = (eid, sqe.user_data)
            if sock.backlog:
                payload = sock.backlog.popleft()
                return (self._accept_conn(payload), None, None)
            if sqe.flags & ringmod.SQEF_MULTISHOT:
                return (0, None, None)  # armed; connections arrive as CQEs
            return (-EAGAIN, None, None)
        if op == ringmod.OP_RECV:
            entry = self.fds.get(sqe.fd)
            if entry is None or entry[0] != "sock":
                return (-EBADF, None, None)
            sock = self.sockets.socks[entry[1]]
            data = bytes(sock.rx[:sqe.len])
            del sock.rx[:len(data)]
            return (len(data), sqe.addr, data)
        if op == ringmod.OP_SEND:
            entry = self.fds.get(sqe.fd)
            if entry is None or entry[0] != "sock":
                return (-EBADF, None, None)
            data = self._read_proxy(sqe.addr, sqe.len)
            if data is None:
                return (-EFAULT, None, None)
            self.sockets.socks[entry[1]].tx += data
            return (len(data), None, None)
        if op == ringmod.OP_GETPID:
            # routed to the host on purpose; the value is untrusted data
            return (self.pid, None, None)
        if op == ringmod.OP_ENCLAVE_MMAP:
            return self._service_mmap(sqe)
        return (-EINVAL, None, None)

    def _accept_conn(self, payload: bytes) -> int:
        sid = self.sockets.new_sock()
        conn = self.sockets.socks[sid]
        conn.kind = "conn"
        conn.rx += payload
        return self._alloc_fd(("sock", sid))

    def _service_mmap(self, sqe: Sqe):
        size = sqe.len
        region_id = sqe.off
        npages = max(1, (size + PAGE_SIZE - 1) // PAGE_SIZE)
        try:
            pages = self.authority.alloc_pages(npages, "proxy", NORMAL, "shm")
        except (QuotaExceeded, OutOfMemory):
            return (-ENOMEM, None, None)
        reg_pages, reg_size = list(pages), size
        attack = self.policy.bad_register
        if attack == "dup" and len(reg_pages) >= 1:
            reg_pages = [reg_pages[0]] + reg_pages[:-1]
        elif attack == "overlap":
            trusted = [pid for pid, info in self.authority.table.entries.items()
                       if info.world != NORMAL]
            if trusted:
                reg_pages[0] = trusted[0]
        elif attack == "size":
            reg_size = size + PAGE_SIZE
        before = self.authority.state_digest() if attack else None
        try:
            self.authority.register_shared(reg_pages, region_id, reg_size)
        except RegistrationError as exc:
            if attack:
                self.events.append(("reg_atomic", region_id,
                                    self.authority.state_digest() == before))
            self.events.append(("registration_rejected", region_id,
                                type(exc).__name__))
            if not attack:
                self.authority.free_pages(pages, "proxy")
                return (-EINVAL, None, None)
            # hostile host lies about success; trusted attach will refuse
            base = self.proxy_space.fresh_base(size)
            return (base, None, None)
        mapping = self.authority.map_region(self.proxy_space, region_id)
        win = self.proxy_space.access(mapping.base, mapping.size, "w")
        self.scribble_targets.append(win)
        if mapping.base > 0x7FFFFFFF:
            raise AssertionError("proxy bases must fit the result field")
        return (mapping.base, None, None)

    # --- scenario hooks ---

    def inject_connection(self, port: int, payload: bytes, now: int) -> bool:
        sid = self.sockets.listeners.get(port)
        if sid is None:
            return False
        sock = self.sockets.socks[sid]
        if sock.armed_accept is not None and self.proxy_alive:
            eid, user_data = sock.armed_accept
            fd = self._accept_conn(payload)
            self._schedule(now + self._latency(),
                           lambda t, c=Cqe(user_data, fd, ringmod.CQF_MORE):
                           self._produce_cqe(eid, c))
        else:
            sock.backlog.append(payload)
        return True
