"""Deterministic cooperative scheduler for the simulated process world.

Each logical process runs as one or more greenlet tasks (a main task for the
protocol, a helper task for control messages).  Exactly one task runs at a
time; tasks hand the baton back on every transport operation, and all wakeups
are explicit events (lock release, message arrival, collective completion,
timer expiry).  A run is therefore a pure function of the program and the
seed: same inputs, same schedule, same step numbers.

The step counter is a logical clock.  It advances by one per transport
operation, and jumps forward when every task is blocked and the earliest
pending timer or scheduled failure lies in the future (discrete-event style).
"""

from __future__ import annotations

import heapq
import itertools
import random
from collections import deque
from typing import Callable, Optional

import greenlet

READY = "ready"
BLOCKED = "blocked"
DONE = "done"
DEAD = "dead"


class SimDeadlock(RuntimeError):
    """No task can make progress and at least one non-idle task is blocked."""


class SimStepLimit(RuntimeError):
    """The step budget was exhausted; the run is likely livelocked."""


class TaskCrash(RuntimeError):
    """A task raised an unexpected exception; chained to the original."""


def derive_rng(seed, *tags) -> random.Random:
    """Stable per-purpose RNG.

    String seeding of random.Random hashes with sha512 internally, so the
    stream does not depend on PYTHONHASHSEED or the platform.
    """
    return random.Random(":".join(str(p) for p in (seed, *tags)))


class Task:
    __slots__ = ("name", "rank", "kind", "fn", "g", "state", "weak", "reason",
                 "wake_reason", "timer_id", "started")

    def __init__(self, name: str, rank: int, kind: str, fn: Callable[[], None]):
        self.name = name
        self.rank = rank
        self.kind = kind
        self.fn = fn
        self.g = None
        self.state = READY
        self.weak = False
        self.reason = ""
        self.wake_reason = None
        self.timer_id = 0
        self.started = False

    def __repr__(self):
        return f"<Task {self.name} {self.state}>"


class Scheduler:
    def __init__(self, seed: int = 0, max_steps: int = 50_000_000):
        self._hub = greenlet.getcurrent()
        self.seed = seed
        self.max_steps = max_steps
        self.step = 0
        self.switches = 0
        self.tasks: list[Task] = []
        self.current: Optional[Task] = None
        self.shutting_down = False
        self._ready: deque[Task] = deque()
        self._timers: list = []     # (wake_step, seq, task, timer_id)
        self._kills: list = []      # (at_step, seq, rank)
        self._seq = itertools.count()
        self._alive: dict[int, bool] = {}
        self._death_hooks: list[Callable[[int], None]] = []

    # -- world membership -------------------------------------------------

    def register_rank(self, rank: int):
        self._alive.setdefault(rank, True)

    def alive(self, rank: int) -> bool:
        return self._alive.get(rank, False)

    def live_ranks(self) -> list[int]:
        return [r for r, a in sorted(self._alive.items()) if a]

    def add_death_hook(self, fn: Callable[[int], None]):
        """fn(rank) runs at the instant a rank dies, before anything else."""
        self._death_hooks.append(fn)

    # -- task management ---------------------------------------------------

    def spawn(self, name: str, rank: int, kind: str, fn: Callable[[], None]) -> Task:
        task = Task(name, rank, kind, fn)

        def body():
            try:
                task.fn()
            finally:
                if task.state != DEAD:
                    task.state = DONE

        task.g = greenlet.greenlet(body, self._hub)
        self.tasks.append(task)
        self.register_rank(rank)
        self._ready.append(task)
        return task

    # -- failure injection ---------------------------------------------------

    def schedule_kill(self, rank: int, at_step: int):
        if at_step <= self.step:
            raise ValueError("kill must be scheduled strictly in the future")
        heapq.heappush(self._kills, (at_step, next(self._seq), rank))

    def kill_now(self, rank: int):
        """Kill a rank at the current step.

        Safe to call from a task, including a task of the dying rank itself
        (the caller should then park; tick() does this automatically).
        """
        self._kill(rank)

    def _kill(self, rank: int):
        if not self._alive.get(rank, False):
            return
        self._alive[rank] = False
        for t in self.tasks:
            if t.rank == rank and t.state in (READY, BLOCKED):
                t.state = DEAD
        for fn in self._death_hooks:
            fn(rank)

    def _apply_due_kills(self):
        while self._kills and self._kills[0][0] <= self.step:
            _, _, rank = heapq.heappop(self._kills)
            self._kill(rank)

    # -- primitives called from inside tasks ---------------------------------

    def tick(self, n: int = 1) -> int:
        """Advance the step clock; the unit of simulated work.

        Applies any failure injections that came due.  If the calling task's
        own rank just died, the call never returns.
        """
        self.step += n
        if self.step > self.max_steps:
            raise SimStepLimit(f"step limit {self.max_steps} exceeded")
        self._apply_due_kills()
        cur = self.current
        if cur is not None and not self._alive.get(cur.rank, True):
            self.park_forever()
        return self.step

    def park_forever(self):
        """The calling task stops executing permanently (process death)."""
        task = self.current
        task.state = DEAD
        while True:
            self._hub.switch()

    def yield_now(self):
        """Hand the baton around; the caller stays runnable (tail of queue)."""
        task = self.current
        task.state = READY
        self._ready.append(task)
        self._hub.switch()

    def block(self, *, timeout: Optional[int] = None, weak: bool = False,
              reason: str = "") -> str:
        """Suspend the calling task until wake() or the timeout fires.

        Returns the wake reason ("timeout" for timer expiry).  weak blocks
        do not count against termination: a run ends cleanly when only weak
        blocked tasks remain.
        """
        task = self.current
        task.state = BLOCKED
        task.weak = weak
        task.reason = reason
        task.timer_id += 1
        if timeout is not None:
            heapq.heappush(self._timers,
                           (self.step + timeout, next(self._seq), task, task.timer_id))
        return self._hub.switch()

    def wake(self, task: Task, reason: str = "event") -> bool:
        """Make a blocked task runnable; cancels its pending timer."""
        if task.state != BLOCKED:
            return False
        task.timer_id += 1
        task.state = READY
        task.wake_reason = reason
        self._ready.append(task)
        return True

    def sleep(self, steps: int):
        if steps > 0:
            self.block(timeout=steps, reason=f"sleep({steps})")

    def wait_until_step(self, step: int):
        if step > self.step:
            self.block(timeout=step - self.step, reason=f"wait_until_step({step})")

    # -- the loop ------------------------------------------------------------

    def run(self):
        """Drive tasks until quiescence; raises on deadlock, crash, livelock."""
        try:
            while True:
                self._apply_due_kills()
                self._fire_due_timers()
                task = None
                while self._ready:
                    cand = self._ready.popleft()
                    if cand.state == READY:
                        task = cand
                        break
                if task is None:
                    if not self._advance_clock():
                        strong = [t for t in self.tasks
                                  if t.state == BLOCKED and not t.weak]
                        if strong:
                            raise SimDeadlock(self._deadlock_report(strong))
                        break
                    continue
                self.current = task
                self.switches += 1
                try:
                    if task.started:
                        task.g.switch(task.wake_reason)
                    else:
                        task.started = True
                        task.g.switch()
                except greenlet.GreenletExit:
                    task.state = DONE
                except (SimStepLimit, SimDeadlock):
                    raise
                except BaseException as exc:
                    task.state = DONE
                    raise TaskCrash(f"task {task.name} crashed: {exc!r}") from exc
                finally:
                    self.current = None
        finally:
            self.shutdown()

    def _fire_due_timers(self):
        while self._timers and self._timers[0][0] <= self.step:
            _, _, task, timer_id = heapq.heappop(self._timers)
            if task.state == BLOCKED and task.timer_id == timer_id:
                task.timer_id += 1
                task.state = READY
                task.wake_reason = "timeout"
                self._ready.append(task)

    def _prune_timers(self):
        while self._timers:
            _, _, task, timer_id = self._timers[0]
            if task.state == BLOCKED and task.timer_id == timer_id:
                break
            heapq.heappop(self._timers)

    def _advance_clock(self) -> bool:
        self._prune_timers()
        candidates = []
        if self._timers:
            candidates.append(self._timers[0][0])
        if self._kills:
            candidates.append(self._kills[0][0])
        if not candidates:
            return False
        nxt = max(self.step, min(candidates))
        if nxt > self.max_steps:
            raise SimStepLimit(f"step limit {self.max_steps} exceeded")
        self.step = nxt
        self._apply_due_kills()
        self._fire_due_timers()
        return True

    def _deadlock_report(self, stuck: list[Task]) -> str:
        lines = [f"deadlock at step {self.step}; blocked tasks:"]
        for t in stuck:
            lines.append(f"  {t.name}: {t.reason or '(no reason given)'}")
        return "\n".join(lines)

    def shutdown(self):
        """Unwind every live task; idempotent, used at run end and on error."""
        if self.shutting_down:
            return
        self.shutting_down = True
        for t in self.tasks:
            if t.g is not None and not t.g.dead:
                try:
                    t.g.throw(greenlet.GreenletExit)
                except BaseException:
                    pass
