"""Budget-enforcing periodic scheduler over integer-nanosecond simulated time.

Tasks are generator bodies that yield scheduling commands:

    ("compute", ns)  consume ns of budget/CPU (side effects in body code run
                     at the simulated instant the generator is resumed)
    ("yield",)       forfeit the rest of this period's budget

Each task gets `budget` of execution every `period`; admission enforces the
utilization sum, budget exhaustion forces preemption, replenishment happens
exactly at period boundaries. Fixed-priority chooses the highest priority
(ties: lower task id); EDF chooses the earliest deadline (ties: earlier
admission). advance() is a pure function of scheduler state, so identical
inputs replay identical traces.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterator

from .errors import AdmissionRejected, InsufficientDonation

FP = "fp"
EDF = "edf"

ENCLAVE = "enclave"
HOST = "host"


@dataclass
class DonationRecord:
    donor: str
    child: str
    budget_share: int
    quota_share: int


@dataclass
class TaskControl:
    tid: int
    name: str
    kind: str
    period: int
    budget: int
    priority: int = 0
    mem_quota: int = 0
    remaining: int = 0
    next_replenish: int = 0
    deadline: int = 0
    yielded: bool = False
    alive: bool = True
    started: bool = False
    cmd_left: int | None = None
    executed_total: int = 0
    window_executed: int = 0
    gen: Iterator | None = None
    donation: DonationRecord | None = None


class BudgetScheduler:
    def __init__(self, policy: str = FP):
        if policy not in (FP, EDF):
            raise ValueError(f"unknown policy {policy}")
        self.policy = policy
        self.now = 0
        self.tasks: dict[str, TaskControl] = {}
        self._order: list[TaskControl] = []
        self._running: TaskControl | None = None
        self._next_tid = 0
        self.trace: list[tuple[int, str, str]] = []
        self.trace_enabled = True
        self.record_timeline = False
        self.timeline: list[tuple[int, int, str]] = []
        # hook(now, task) fired at each replenish boundary, before reset
        self.on_replenish: Callable | None = None
        self.util = Fraction(0)

    # --- admission / donation ---

    def admit(self, name: str, kind: str, period: int, budget: int,
              body: Iterator, priority: int = 0, mem_quota: int = 0) -> TaskControl:
        """Admit a task iff the utilization sum stays within one core."""
        if period <= 0 or budget <= 0 or budget > period:
            raise AdmissionRejected(f"bad parameters period={period} budget={budget}")
        u = Fraction(budget, period)
        if self.util + u > 1:
            raise AdmissionRejected(
                f"utilization {float(self.util + u):.3f} > 1.0")
        if name in self.tasks:
            raise AdmissionRejected(f"duplicate task name {name}")
        t = TaskControl(self._next_tid, name, kind, period, budget,
                        priority, mem_quota, gen=body)
        self._next_tid += 1
        t.remaining = budget
        t.next_replenish = self.now + period
        t.deadline = self.now + period
        self.tasks[name] = t
        self._order.append(t)
        self.util += u
        return t

    def donate(self, parent_name: str, child_name: str, kind: str,
               period: int, budget: int, body: Iterator,
               budget_share: int, quota_share: int = 0,
               priority: int = 0) -> TaskControl:
        """Carve a child's budget out of the parent's.

        The donated utilization (budget_share over the parent's period) must
        cover the child's own utilization, so the admitted sum never grows.
        Budget and quota return to the donor on clean child exit.
        """
        parent = self.tasks.get(parent_name)
        if parent is None or not parent.alive:
            raise InsufficientDonation(f"no live donor {parent_name}")
        if budget_share <= 0 or parent.budget < budget_share:
            raise InsufficientDonation(
                f"{parent_name} budget {parent.budget} < share {budget_share}")
        if parent.remaining < budget_share:
            raise InsufficientDonation(
                f"{parent_name} remaining {parent.remaining} < share {budget_share}")
        if period <= 0:
            period = parent.period
        if budget <= 0:
            budget = budget_share
        if Fraction(budget, period) > Fraction(budget_share, parent.period):
            raise InsufficientDonation(
                "child utilization exceeds the donated share")
        if child_name in self.tasks:
            raise InsufficientDonation(f"duplicate task name {child_name}")
        donated_u = Fraction(budget_share, parent.period)
        parent.budget -= budget_share
        parent.remaining -= budget_share
        self.util -= donated_u
        t = TaskControl(self._next_tid, child_name, kind, period, budget,
                        priority, quota_share, gen=body)
        self._next_tid += 1
        t.remaining = budget
        t.next_replenish = self.now + period
        t.deadline = self.now + period
        t.donation = DonationRecord(parent_name, child_name, budget_share,
                                    quota_share)
        self.tasks[child_name] = t
        self._order.append(t)
        self.util += Fraction(budget, period)
        return t

    # --- trace helpers ---

    def _emit(self, task: TaskControl, event: str) -> None:
        if self.trace_enabled:
            self.trace.append((self.now, task.name, event))

    def export_trace_lines(self) -> list[str]:
        return [f"{t} {name} {event}" for t, name, event in self.trace]

    # --- core loop ---

    def _do_replenish(self) -> None:
        for t in self._order:
            if t.alive and t.next_replenish <= self.now:
                if self.on_replenish is not None:
                    self.on_replenish(self.now, t)
                t.remaining = t.budget
                t.yielded = False
                t.window_executed = 0
                t.deadline = t.next_replenish + t.period
                t.next_replenish += t.period
                self._emit(t, "replenish")

    def _eligible(self, t: TaskControl) -> bool:
        return t.alive and not t.yielded and t.remaining > 0

    def _pick(self) -> TaskControl | None:
        best = None
        best_key = None
        for t in self._order:
            if not self._eligible(t):
                continue
            if self.policy == FP:
                key = (-t.priority, t.tid)
            else:
                key = (t.deadline, t.tid)
            if best_key is None or key < best_key:
                best = t
                best_key = key
        return best

    def _set_running(self, t: TaskControl | None) -> None:
        if self._running is t:
            return
        if self._running is not None:
            self._emit(self._running, "preempt")
        self._running = t
        if t is not None:
            self._emit(t, "dispatch")

    def _drop_running(self) -> None:
        # running task stopped by its own event (yield/exhaust/exit): the
        # specific event was already traced, so no preempt record
        self._running = None

    def _exit_task(self, t: TaskControl) -> None:
        t.alive = False
        self._emit(t, "exit")
        self.util -= Fraction(t.budget, t.period)
        d = t.donation
        if d is not None:
            donor = self.tasks.get(d.donor)
            if donor is not None and donor.alive:
                donor.budget += d.budget_share
                donor.remaining = min(donor.remaining + d.budget_share,
                                      donor.budget)
                self.util -= Fraction(donor.budget - d.budget_share, donor.period)
                self.util += Fraction(donor.budget, donor.period)

    def _ensure_command(self, t: TaskControl) -> bool:
        """Resume the body until it owes compute time. False when the task
        yielded or exited during the resume."""
        guard = 0
        while t.cmd_left is None or t.cmd_left == 0:
            guard += 1
            if guard > 4096:
                raise RuntimeError(f"task {t.name} spins on zero-cost commands")
            try:
                if t.started:
                    cmd = t.gen.send(self.now)
                else:
                    t.started = True
                    cmd = next(t.gen)
            except StopIteration:
                self._drop_running()
                self._exit_task(t)
                return False
            if cmd[0] == "compute":
                t.cmd_left = cmd[1]
            elif cmd[0] == "yield":
                t.yielded = True
                t.cmd_left = None
                self._emit(t, "yield")
                self._drop_running()
                return False
            else:
                raise ValueError(f"unknown scheduling command {cmd!r}")
        return True

    def _next_boundary(self) -> int | None:
        nxt = None
        for t in self._order:
            if t.alive and (nxt is None or t.next_replenish < nxt):
                nxt = t.next_replenish
        return nxt

    def advance(self, dt: int) -> None:
        self.run_until(self.now + dt)

    def run_until(self, t_end: int) -> None:
        while self.now < t_end:
            self._do_replenish()
            task = self._pick()
            if task is None:
                self._set_running(None)
                nxt = self._next_boundary()
                self.now = t_end if nxt is None else min(nxt, t_end)
                continue
            self._set_running(task)
            if not self._ensure_command(task):
                continue
            nxt = self._next_boundary()
            slice_end = min(t_end, self.now + task.remaining,
                            self.now + task.cmd_left)
            if nxt is not None:
                slice_end = min(slice_end, nxt)
            dt = slice_end - self.now
            if dt > 0:
                if self.record_timeline:
                    self.timeline.append((self.now, slice_end, task.name))
                self.now = slice_end
                task.remaining -= dt
                task.cmd_left -= dt
                task.executed_total += dt
                task.window_executed += dt
            if task.remaining == 0:
                self._emit(task, "exhaust")
                self._drop_running()
