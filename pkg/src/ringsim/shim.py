"""Synchronous call layer and a buffered POSIX-flavored facade.

Task bodies are generators, so every blocking call here is also a generator
and is entered with `yield from`. A synchronous wait polls the event loop at
a fixed tick cost and converts the three ways a wait can end into errno
conventions: negative errno for host refusals, -ETIMEDOUT when the caller's
deadline passes, -EINTR when an alarm fires first, -EAGAIN for a zero-timeout
probe that would block. Timed-out calls abandon their promise and tombstone
the submission, so a straggler completion settles nothing and frees nothing
twice.

The file facade stages writes privately and submits block-multiple chunks at
tracked offsets with one write in flight per file; write errors surface on a
later write/flush/close (deferred-error poisoning), which is what buffered
POSIX io does. Pseudo files (size reported as device geometry at open) skip
staging entirely.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import ring as ringmod
from .config import EAGAIN, EFAULT, EINTR, ENOMEM, ETIMEDOUT
from .errors import PoolExhausted, RegistrationRejected, Untranslatable
from .promise import (FAILED, FULFILLED, PENDING, async_open, async_path_op,
                      async_read, async_statx, async_write)


def _fail_value(error):
    # host refusals arrive as errno ints; trusted-side refusals as typed
    # errors with a sensible errno image; anything else is a caller bug
    if isinstance(error, int):
        return -error
    if isinstance(error, (PoolExhausted, RegistrationRejected)):
        return -ENOMEM
    if isinstance(error, Untranslatable):
        return -EFAULT
    if isinstance(error, Exception):
        raise error
    raise RuntimeError(f"promise failed: {error}")


def sync_call(rt, promise, timeout_ns: int | None = None,
              alarm_at: int | None = None):
    """Wait for a promise inside a task body: `r = yield from sync_call(...)`.

    Returns the fulfilled value, or a negative errno. timeout_ns=0 probes
    once and returns -EAGAIN when still pending, leaving the call running.
    """
    rt.pump()
    if promise.state == FULFILLED:
        return promise.value
    if promise.state == FAILED:
        return _fail_value(promise.error)
    if timeout_ns == 0:
        return -EAGAIN
    deadline = None if timeout_ns is None else rt.now() + timeout_ns
    while True:
        yield ("compute", rt.cfg.poll_tick)
        rt.pump()
        if promise.state == FULFILLED:
            return promise.value
        if promise.state == FAILED:
            return _fail_value(promise.error)
        now = rt.now()
        if alarm_at is not None and now >= alarm_at:
            _abandon(rt, promise)
            return -EINTR
        if deadline is not None and now >= deadline:
            _abandon(rt, promise)
            return -ETIMEDOUT


def _abandon(rt, promise) -> None:
    rt.handle.retire_tag(promise.tag)
    rt.pool.abandon(promise)


def getpid(rt, timeout_ns: int | None = None):
    """Host-claimed pid; advisory only, never an authority for decisions."""
    from .enclave import SqeArgs
    p = rt.submit_async(ringmod.OP_GETPID, SqeArgs(translate=False))
    return (yield from sync_call(rt, p, timeout_ns))


@dataclass
class _ShimFile:
    fd: int
    block_size: int
    pseudo: bool
    read_pos: int = 0
    file_off: int = 0            # offset of the next unsubmitted staged byte
    staged: bytearray = field(default_factory=bytearray)
    inflight: object = None      # at most one write promise per file
    error: int = 0               # deferred errno; poisons later calls


class PosixShim:
    """open/read/write/flush/close over the async engine, for task bodies."""

    def __init__(self, rt, timeout_ns: int | None = None):
        self.rt = rt
        self.timeout_ns = timeout_ns
        self._files: dict[int, _ShimFile] = {}

    # --- opening / metadata ---

    def open(self, path: str, create: bool = False, trunc: bool = False):
        flags = (ringmod.OPENF_CREATE if create else 0) | \
                (ringmod.OPENF_TRUNC if trunc else 0)
        fd = yield from sync_call(self.rt, async_open(self.rt, path.encode(),
                                                      flags), self.timeout_ns)
        if fd < 0:
            return fd
        geo = yield from sync_call(self.rt, async_statx(self.rt, fd),
                                   self.timeout_ns)
        if isinstance(geo, int):
            return geo  # statx refused; surface its errno
        _size, block, pseudo = geo
        self._files[fd] = _ShimFile(fd, max(block, 1), bool(pseudo))
        return fd

    # --- reads (unbuffered) ---

    def read(self, fd: int, n: int, off: int | None = None):
        f = self._files[fd]
        at = f.read_pos if off is None else off
        data = yield from sync_call(self.rt, async_read(self.rt, fd, n, at),
                                    self.timeout_ns)
        if isinstance(data, int):
            return data
        if off is None:
            f.read_pos = at + len(data)
        return data

    # --- buffered writes ---

    def write(self, fd: int, data: bytes):
        """Stage data; submit whole blocks as they fill. Returns len(data)
        right away unless the file is poisoned or staging hits its cap and
        the drain times out."""
        f = self._files[fd]
        self.rt.pump()  # keeps the staged-chunk chain moving between waits
        if f.error:
            return -f.error
        if f.pseudo:
            r = yield from sync_call(
                self.rt, async_write(self.rt, fd, data, f.file_off),
                self.timeout_ns)
            if r < 0:
                f.error = -r
                return r
            f.file_off += r
            return r
        cap = self.rt.cfg.write_staging_cap
        waited = 0
        while len(f.staged) + len(data) > cap:
            self._maybe_submit(f)
            yield ("compute", self.rt.cfg.poll_tick)
            waited += self.rt.cfg.poll_tick
            self.rt.pump()
            if f.error:
                return -f.error
            if self.timeout_ns is not None and waited > self.timeout_ns:
                return -ETIMEDOUT
        f.staged += data
        self._maybe_submit(f)
        return len(data)

    def _maybe_submit(self, f: _ShimFile, tail: bool = False) -> None:
        if f.inflight is not None or f.error or not f.staged:
            return
        block = f.block_size
        n = (len(f.staged) // block) * block
        if n == 0:
            if not tail:
                return
            n = len(f.staged)
        chunk = bytes(f.staged[:n])
        del f.staged[:n]
        at = f.file_off
        f.file_off += n
        p = async_write(self.rt, f.fd, chunk, at)

        def _landed(_args, result):
            f.inflight = None
            if result < len(chunk):
                f.error = -result if result < 0 else 5  # short write -> EIO
            else:
                self._maybe_submit(f, tail)
            return result

        def _lost(_args, error):
            f.inflight = None
            if isinstance(error, int):
                f.error = error
            elif isinstance(error, (PoolExhausted, RegistrationRejected)):
                f.error = ENOMEM
            elif isinstance(error, Untranslatable):
                f.error = EFAULT
            else:
                f.error = 5

        f.inflight = self.rt.pool.then(p, _landed, on_fail=_lost)

    def flush(self, fd: int):
        """Drain staging (tail included) and the in-flight write."""
        f = self._files[fd]
        waited = 0
        while (f.staged or f.inflight is not None) and not f.error:
            self._maybe_submit(f, tail=True)
            yield ("compute", self.rt.cfg.poll_tick)
            waited += self.rt.cfg.poll_tick
            self.rt.pump()
            if self.timeout_ns is not None and waited > self.timeout_ns:
                return -ETIMEDOUT
        return -f.error if f.error else 0

    def close(self, fd: int):
        from .enclave import SqeArgs
        r = yield from self.flush(fd)
        p = self.rt.submit_async(ringmod.OP_CLOSE,
                                 SqeArgs(fd=fd, translate=False))
        rc = yield from sync_call(self.rt, p, self.timeout_ns)
        self._files.pop(fd, None)
        return r if r < 0 else rc

    # --- path ops ---

    def unlink(self, path: str):
        return (yield from sync_call(
            self.rt, async_path_op(self.rt, ringmod.OP_UNLINK, path.encode()),
            self.timeout_ns))

    def mkdir(self, path: str):
        return (yield from sync_call(
            self.rt, async_path_op(self.rt, ringmod.OP_MKDIR, path.encode()),
            self.timeout_ns))
