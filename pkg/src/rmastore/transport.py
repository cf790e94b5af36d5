"""Simulated one-sided-communication transport with survivable-failure semantics.

Models the pieces of an RMA stack the store depends on: windows of per-rank
memory blocks, passive-target lock epochs, put/get/compare-and-swap with
explicit flush completion, window revocation, group shrink and agreement, and
a two-sided control channel (the only channel that reports peer death
reliably).

Two fidelity settings control what a dead peer looks like:

  * "spec": synchronization calls (lock, unlock, flush, lock_all) targeting a
    dead rank return ProcFailed, the standardized error-reporting behavior.
  * "real-osc": any one-sided call on a dead rank's block simply stops making
    progress and is surfaced as SimulatedHang after T_HANG steps; only
    ctl_send reports ProcFailed.  This is the behavior the ping workaround
    exists for.

In both settings a lock HELD by a dead rank is never released: waiters stay
parked until the window is revoked (or, in real-osc, until T_HANG).

The step clock advances by one per transport call and every call ends by
yielding, so concurrency interleaves at operation granularity and runs are
deterministic.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import greenlet

from .sim import Scheduler

T_HANG = 1000       # steps a real-osc call stalls on a dead peer before giving up
FIDELITY_SPEC = "spec"
FIDELITY_REAL = "real-osc"

OK = "Ok"
PROC_FAILED = "ProcFailed"
REVOKED = "Revoked"
HANG = "SimulatedHang"
OUT_OF_RANGE = "OutOfRange"

EXCLUSIVE = "exclusive"
SHARED = "shared"

# ctl message kinds
PING = "Ping"
ENLARGE_REQUEST = "EnlargeRequest"
ENLARGE_ACK = "EnlargeAck"
TXN_LOG_UPDATE = "TxnLogUpdate"
TXN_LOG_ACK = "TxnLogAck"
TXN_SUBMIT = "TxnSubmit"
TXN_OUTCOME = "TxnOutcome"
TXN_FINALIZE = "TxnFinalize"
TXN_KICK = "TxnKick"
EXIT_INTENT = "ExitIntent"
SHUTDOWN = "Shutdown"

# kinds handled by the per-process helper task; everything else lands in the
# main queue where the process's own blocking waits pick it up
HELPER_KINDS = frozenset({PING, ENLARGE_REQUEST, TXN_LOG_UPDATE, TXN_LOG_ACK,
                          TXN_SUBMIT, TXN_FINALIZE, TXN_KICK, SHUTDOWN})


class TransportUsageError(RuntimeError):
    """Contract violation by the caller (a bug, not a protocol outcome)."""


class EpochError(TransportUsageError):
    pass


class BadOffset(TransportUsageError):
    pass


class CollectiveError(TransportUsageError):
    pass


@dataclass
class TransportResult:
    outcome: str
    data: Optional[bytes] = None
    value: Optional[int] = None      # cas: value found before the swap
    failed_rank: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.outcome == OK


@dataclass
class CtlMessage:
    kind: str
    src: int
    dst: int
    payload: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CostModel:
    """Affine communication cost: alpha per data message, beta per byte,
    gamma per flush, delta per ping.  Lock traffic is not billed; the model
    follows the accounting used for the replication cost estimate, where a
    replicated put costs (R+1)*(alpha + beta*(8+len) + gamma) plus pings."""
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 1.0
    delta: float = 1.0

    def total(self, counters: dict) -> float:
        return (counters["msgs"] * self.alpha + counters["bytes"] * self.beta
                + counters["flushes"] * self.gamma + counters["pings"] * self.delta)


@dataclass
class WorldGeneration:
    index: int
    live: list          # original ranks, ascending (order-preserving renumber)
    translation: dict   # original rank -> rank within this generation
    revoked: bool = False

    @property
    def size(self) -> int:
        return len(self.live)

    def to_original(self, gen_rank: int) -> int:
        return self.live[gen_rank]


class Block:
    __slots__ = ("buf", "lock_mode", "holders", "queue", "staged")

    def __init__(self, buf: bytearray):
        self.buf = buf
        self.lock_mode = None          # None | EXCLUSIVE | SHARED
        self.holders: set = set()
        self.queue: deque = deque()    # (task, origin, mode) waiting to lock
        self.staged: dict = {}         # origin -> [(offset, bytes)] awaiting flush


class Window:
    def __init__(self, wid: int, tag, gen: WorldGeneration):
        self.id = wid
        self.tag = tag
        self.gen = gen
        self.blocks: dict[int, Block] = {}   # original rank -> Block
        self.revoked = False
        self.freed = False
        self.epochs: dict[int, dict[int, str]] = {}  # origin -> {target: mode}
        self.lockall: set = set()            # origins with an active lock_all epoch
        self.hang_waiters: list = []         # tasks parked on dead-target calls

    def epoch_mode(self, origin: int, target: int) -> Optional[str]:
        return self.epochs.get(origin, {}).get(target)

    def __repr__(self):
        return f"<Window {self.id} tag={self.tag!r}>"


class _Collective:
    __slots__ = ("key", "op", "tag", "gen", "finish", "arrived", "waiters",
                 "done", "result", "revoked", "immune")

    def __init__(self, key, op, tag, gen, finish, immune):
        self.key = key
        self.op = op
        self.tag = tag
        self.gen = gen
        self.finish = finish
        self.arrived = {}       # original rank -> contribution
        self.waiters = []
        self.done = False
        self.result = None
        self.revoked = False
        self.immune = immune


class _Mailbox:
    __slots__ = ("helper_q", "main_q", "waiters")

    def __init__(self):
        self.helper_q = deque()
        self.main_q = deque()
        self.waiters = []   # (task, which, match)


class Revoked(Exception):
    """Internal signal: a collective bailed out because the world was revoked.
    Exposed to callers as a TransportResult, never raised across the API."""


class Transport:
    """One instance simulates the whole world; ranks share it and the
    scheduler keeps their accesses interleaved deterministically."""

    def __init__(self, sched: Scheduler, n_procs: int, fidelity: str = FIDELITY_SPEC,
                 cost_model: Optional[CostModel] = None,
                 trace: Optional[Callable[[dict], None]] = None):
        if fidelity not in (FIDELITY_SPEC, FIDELITY_REAL):
            raise ValueError(f"unknown fidelity {fidelity!r}")
        self.sched = sched
        self.n_procs = n_procs
        self.fidelity = fidelity
        self.cost_model = cost_model or CostModel()
        self.trace = trace
        self.windows: dict[int, Window] = {}
        self.generations: list[WorldGeneration] = [
            WorldGeneration(0, list(range(n_procs)), {r: r for r in range(n_procs)})
        ]
        self.mailboxes = {r: _Mailbox() for r in range(n_procs)}
        self.counters = {"msgs": 0, "bytes": 0, "flushes": 0, "pings": 0,
                         "ops": 0, "hangs": 0, "proc_failed": 0,
                         "concurrent_writers": 0}
        self._next_wid = itertools.count()
        self._collectives: dict = {}
        self._agree_seq: dict = {}
        self._revoke_watchers: list = []
        self.world_revocations = 0
        for r in range(n_procs):
            sched.register_rank(r)
        sched.add_death_hook(self._on_death)

    # ------------------------------------------------------------------
    @property
    def world(self) -> WorldGeneration:
        return self.generations[-1]

    def alive(self, rank: int) -> bool:
        return self.sched.alive(rank)

    def cost_total(self) -> float:
        return self.cost_model.total(self.counters)

    # -- common prologue/epilogue ---------------------------------------

    def _enter(self):
        if self.sched.shutting_down:
            raise greenlet.GreenletExit
        self.counters["ops"] += 1
        self.sched.tick()

    def _emit(self, op: str, outcome: str, **detail):
        if outcome == HANG:
            self.counters["hangs"] += 1
        elif outcome == PROC_FAILED:
            self.counters["proc_failed"] += 1
        if self.trace is not None:
            rank = self.sched.current.rank if self.sched.current else None
            ev = {"step": self.sched.step, "rank": rank, "op": op,
                  "outcome": outcome}
            ev.update(detail)
            self.trace(ev)

    def _finish(self, op: str, result: TransportResult, **detail) -> TransportResult:
        self._emit(op, result.outcome, **detail)
        self.sched.yield_now()
        return result

    def _caller(self) -> int:
        return self.sched.current.rank

    # -- death bookkeeping -----------------------------------------------

    def _on_death(self, rank: int):
        box = self.mailboxes.get(rank)
        if box is not None:
            box.helper_q.clear()
            box.main_q.clear()
            box.waiters.clear()
        self._emit("death", "Ok", victim=rank)
        for coll in list(self._collectives.values()):
            if not coll.done:
                self._try_complete(coll)

    # -- control channel ----------------------------------------------------

    def ctl_send(self, dst: int, kind: str, **payload) -> TransportResult:
        self._enter()
        if kind == PING:
            self.counters["pings"] += 1
        if not self.alive(dst):
            res = TransportResult(PROC_FAILED, failed_rank=dst)
            return self._finish("ctl_send", res, dst=dst, kind=kind)
        msg = CtlMessage(kind, self._caller(), dst, payload)
        box = self.mailboxes[dst]
        which = "helper" if kind in HELPER_KINDS else "main"
        (box.helper_q if which == "helper" else box.main_q).append(msg)
        for entry in list(box.waiters):
            task, wait_which, match = entry
            if wait_which == which and (match is None or match(msg)):
                if self.sched.wake(task, "mail"):
                    box.waiters.remove(entry)
        return self._finish("ctl_send", TransportResult(OK), dst=dst, kind=kind)

    def ping(self, target: int) -> TransportResult:
        """Delivery check over the two-sided channel; the reliable detector."""
        return self.ctl_send(target, PING)

    def ctl_poll(self, which: str = "helper") -> Optional[CtlMessage]:
        """Nonblocking receive, any source, FIFO per sender."""
        self._enter()
        box = self.mailboxes[self._caller()]
        q = box.helper_q if which == "helper" else box.main_q
        msg = q.popleft() if q else None
        self.sched.yield_now()
        return msg

    def ctl_wait(self, which: str, match: Optional[Callable] = None,
                 timeout: Optional[int] = None) -> Optional[CtlMessage]:
        """Blocking selective receive; None on timeout.  Waiting is not an
        operation, so no step is consumed.  Helper waits are weak: an idle
        helper never holds the run open."""
        box = self.mailboxes[self._caller()]
        q = box.helper_q if which == "helper" else box.main_q
        while True:
            if self.sched.shutting_down:
                raise greenlet.GreenletExit
            for msg in q:
                if match is None or match(msg):
                    q.remove(msg)
                    return msg
            entry = (self.sched.current, which, match)
            box.waiters.append(entry)
            reason = self.sched.block(timeout=timeout, weak=(which == "helper"),
                                      reason=f"ctl_wait:{which}")
            if entry in box.waiters:
                box.waiters.remove(entry)
            if reason == "timeout":
                return None

    # -- window lifecycle -----------------------------------------------------

    def win_create(self, tag, capacity: int = 0,
                   buffer: Optional[bytearray] = None):
        """Collective over the current generation's live ranks.  Each caller
        contributes its own block: fresh zeroed memory of `capacity`, or an
        existing buffer to re-register (rebuild reuses survivors' bytes).
        Returns the Window, or a Revoked TransportResult."""
        self._enter()
        if buffer is None:
            buffer = bytearray(capacity)
        try:
            win = self._collective(("win_create", tag), "win_create", buffer,
                                   immune=False, finish=self._finish_create)
        except Revoked:
            res = TransportResult(REVOKED)
            self._emit("win_create", REVOKED, tag=str(tag))
            self.sched.yield_now()
            return res
        self._emit("win_create", OK, tag=str(tag), win=win.id)
        self.sched.yield_now()
        return win

    def _finish_create(self, coll: _Collective) -> Window:
        win = Window(next(self._next_wid), coll.tag, coll.gen)
        for rank, buf in sorted(coll.arrived.items()):
            win.blocks[rank] = Block(buf)
        self.windows[win.id] = win
        return win

    def win_free(self, win: Window) -> TransportResult:
        """Collective; succeeds regardless of held locks and dead members.
        Buffers stay readable through win.blocks for re-registration."""
        self._enter()
        if win.freed:
            raise CollectiveError(f"win_free: window {win.id} already freed")
        self._collective(("win_free", win.id), "win_free", True,
                         immune=True, finish=lambda coll: self._finish_free(win))
        self._emit("win_free", OK, win=win.id)
        self.sched.yield_now()
        return TransportResult(OK)

    def _finish_free(self, win: Window):
        win.freed = True
        win.epochs.clear()
        win.lockall.clear()
        for block in win.blocks.values():
            block.lock_mode = None
            block.holders.clear()
            block.staged.clear()
            while block.queue:
                task, _, _ = block.queue.popleft()
                self.sched.wake(task, "freed")
        for task in win.hang_waiters:
            self.sched.wake(task, "freed")
        win.hang_waiters.clear()
        return True

    def win_revoke(self, win: Window) -> TransportResult:
        """Any rank may revoke after detecting a failure; idempotent.  Wakes
        every task blocked on the window; their calls return Revoked."""
        self._enter()
        if not win.revoked:
            win.revoked = True
            for block in win.blocks.values():
                while block.queue:
                    task, _, _ = block.queue.popleft()
                    self.sched.wake(task, "revoked")
            for task in win.hang_waiters:
                self.sched.wake(task, "revoked")
            win.hang_waiters.clear()
        return self._finish("win_revoke", TransportResult(OK), win=win.id)

    # -- epochs ---------------------------------------------------------------

    def _check_open(self, win: Window):
        # a window freed by the post-revocation rebuild is a stale-generation
        # handle: accesses resolve as REVOKED through the per-op checks below
        if win.freed and not win.revoked:
            raise TransportUsageError(f"window {win.id} used after free")

    def win_lock(self, win: Window, target: int, mode: str = EXCLUSIVE,
                 nocheck: bool = False) -> TransportResult:
        self._enter()
        self._check_open(win)
        me = self._caller()
        detail = dict(win=win.id, target=target, mode=mode)
        if win.revoked:
            return self._finish("win_lock", TransportResult(REVOKED), **detail)
        if win.epoch_mode(me, target) is not None or me in win.lockall:
            raise EpochError(f"rank {me} already holds an epoch on w{win.id}/{target}")
        if not self.alive(target):
            res = self._dead_target_sync(win, target)
            return self._finish("win_lock", res, **detail)
        block = win.blocks.get(target)
        if block is None:
            res = TransportResult(PROC_FAILED, failed_rank=target)
            return self._finish("win_lock", res, **detail)
        res = self._acquire(win, block, me, target, mode, nocheck)
        if res.ok:
            win.epochs.setdefault(me, {})[target] = mode
        return self._finish("win_lock", res, **detail)

    def _acquire(self, win: Window, block: Block, origin: int, target: int,
                 mode: str, nocheck: bool) -> TransportResult:
        if nocheck:
            # caller asserts no conflicting lock exists; granted without checks
            block.holders.add(origin)
            if block.lock_mode is None:
                block.lock_mode = mode
            return TransportResult(OK)
        if self._grantable(block, mode):
            block.holders.add(origin)
            block.lock_mode = mode
            return TransportResult(OK)
        task = self.sched.current
        entry = (task, origin, mode)
        block.queue.append(entry)
        timeout = T_HANG if self.fidelity == FIDELITY_REAL else None
        reason = self.sched.block(
            timeout=timeout,
            reason=f"win_lock w{win.id}/{target} held by {sorted(block.holders)}")
        if reason == "granted":
            return TransportResult(OK)
        if entry in block.queue:
            block.queue.remove(entry)
        if reason in ("revoked", "freed"):
            return TransportResult(REVOKED)
        return TransportResult(HANG, failed_rank=target)

    @staticmethod
    def _grantable(block: Block, mode: str) -> bool:
        if block.lock_mode is None or not block.holders:
            return True
        return mode == SHARED and block.lock_mode == SHARED

    def _release(self, block: Block, origin: int):
        block.holders.discard(origin)
        if block.holders:
            return
        block.lock_mode = None
        while block.queue:
            task, nxt_origin, nxt_mode = block.queue[0]
            if not self.alive(nxt_origin):
                block.queue.popleft()   # waiter died while queued
                continue
            if not self._grantable(block, nxt_mode):
                break
            block.queue.popleft()
            block.holders.add(nxt_origin)
            block.lock_mode = nxt_mode
            self.sched.wake(task, "granted")
            if nxt_mode == EXCLUSIVE:
                break

    def win_unlock(self, win: Window, target: int) -> TransportResult:
        """Completes pending operations on the target (implies flush, though
        not billed as one), then ends the epoch.  The epoch ends even when
        the target is dead or the window revoked."""
        self._enter()
        self._check_open(win)
        me = self._caller()
        detail = dict(win=win.id, target=target)
        if win.epoch_mode(me, target) is None:
            raise EpochError(f"rank {me} holds no epoch on w{win.id}/{target}")
        if me in win.lockall:
            raise EpochError("epoch was opened with lock_all; use unlock_all")
        if win.revoked:
            self._discard_staged(win, target, me)
            res = TransportResult(REVOKED)
        else:
            res = self._complete_target(win, target, me)
        del win.epochs[me][target]
        block = win.blocks.get(target)
        if block is not None:
            self._release(block, me)
        return self._finish("win_unlock", res, **detail)

    def win_lock_all(self, win: Window, nocheck: bool = True) -> TransportResult:
        """Shared epoch on every block at once; the long-lived epoch style."""
        self._enter()
        self._check_open(win)
        me = self._caller()
        if me in win.lockall or win.epochs.get(me):
            raise EpochError(f"rank {me} already holds an epoch on w{win.id}")
        if win.revoked:
            return self._finish("win_lock_all", TransportResult(REVOKED), win=win.id)
        if not nocheck:
            raise TransportUsageError("only the nocheck variant is modeled; "
                                      "contending lock_all is never used here")
        dead = [t for t in sorted(win.blocks) if not self.alive(t)]
        if dead:
            res = self._dead_target_sync(win, dead[0])
            return self._finish("win_lock_all", res, win=win.id, target=dead[0])
        epochs = win.epochs.setdefault(me, {})
        for target, block in win.blocks.items():
            block.holders.add(me)
            if block.lock_mode is None:
                block.lock_mode = SHARED
            epochs[target] = SHARED
        win.lockall.add(me)
        return self._finish("win_lock_all", TransportResult(OK), win=win.id)

    def win_unlock_all(self, win: Window) -> TransportResult:
        self._enter()
        self._check_open(win)
        me = self._caller()
        if me not in win.lockall:
            raise EpochError(f"rank {me} holds no lock_all epoch on w{win.id}")
        worst = TransportResult(OK)
        for target in sorted(win.epochs.get(me, {})):
            if win.revoked:
                self._discard_staged(win, target, me)
                res = TransportResult(REVOKED)
            else:
                res = self._complete_target(win, target, me)
            if worst.ok and not res.ok:
                worst = res
            block = win.blocks.get(target)
            if block is not None:
                self._release(block, me)
        win.epochs.pop(me, None)
        win.lockall.discard(me)
        return self._finish("win_unlock_all", worst, win=win.id)

    # -- one-sided data movement ------------------------------------------

    def _require_epoch(self, win: Window, origin: int, target: int):
        if win.epoch_mode(origin, target) is None:
            raise EpochError(f"rank {origin} has no epoch on w{win.id}/{target}; "
                             "lock or lock_all first")

    def put(self, win: Window, target: int, offset: int, data: bytes) -> TransportResult:
        """Nonblocking one-sided write; lands atomically at the next flush of
        this target.  Ok means issued, not delivered."""
        self._enter()
        self._check_open(win)
        me = self._caller()
        detail = dict(win=win.id, target=target, off=offset, n=len(data))
        self.counters["msgs"] += 1
        self.counters["bytes"] += len(data)
        if win.revoked:
            return self._finish("put", TransportResult(REVOKED), **detail)
        self._require_epoch(win, me, target)
        if self.fidelity == FIDELITY_REAL and not self.alive(target):
            return self._finish("put", self._hang(win, target), **detail)
        block = win.blocks.get(target)
        if block is None:
            return self._finish("put", TransportResult(PROC_FAILED, failed_rank=target),
                                **detail)
        if offset < 0 or offset + len(data) > len(block.buf):
            return self._finish("put", TransportResult(OUT_OF_RANGE), **detail)
        if any(ops for origin, ops in block.staged.items() if origin != me):
            self.counters["concurrent_writers"] += 1
        block.staged.setdefault(me, []).append((offset, bytes(data)))
        return self._finish("put", TransportResult(OK), **detail)

    def get(self, win: Window, target: int, offset: int, nbytes: int) -> TransportResult:
        """Nonblocking one-sided read of committed bytes; validity of the data
        is only established by a following flush."""
        self._enter()
        self._check_open(win)
        me = self._caller()
        detail = dict(win=win.id, target=target, off=offset, n=nbytes)
        self.counters["msgs"] += 1
        self.counters["bytes"] += nbytes
        if win.revoked:
            return self._finish("get", TransportResult(REVOKED), **detail)
        self._require_epoch(win, me, target)
        if self.fidelity == FIDELITY_REAL and not self.alive(target):
            return self._finish("get", self._hang(win, target), **detail)
        block = win.blocks.get(target)
        if block is None:
            return self._finish("get", TransportResult(PROC_FAILED, failed_rank=target),
                                **detail)
        if offset < 0 or offset + nbytes > len(block.buf):
            return self._finish("get", TransportResult(OUT_OF_RANGE), **detail)
        data = bytes(block.buf[offset:offset + nbytes])
        return self._finish("get", TransportResult(OK, data=data), **detail)

    def flush(self, win: Window, target: int) -> TransportResult:
        """Completes this origin's pending puts on the target, in issue order.
        The call that reports a dead peer in spec fidelity."""
        self._enter()
        self._check_open(win)
        me = self._caller()
        detail = dict(win=win.id, target=target)
        self.counters["flushes"] += 1
        if win.revoked:
            self._discard_staged(win, target, me)
            return self._finish("flush", TransportResult(REVOKED), **detail)
        self._require_epoch(win, me, target)
        res = self._complete_target(win, target, me)
        return self._finish("flush", res, **detail)

    def _complete_target(self, win: Window, target: int, origin: int) -> TransportResult:
        if not self.alive(target):
            self._discard_staged(win, target, origin)
            if self.fidelity == FIDELITY_SPEC:
                return TransportResult(PROC_FAILED, failed_rank=target)
            return self._hang(win, target)
        block = win.blocks.get(target)
        if block is None:
            return TransportResult(PROC_FAILED, failed_rank=target)
        for offset, data in block.staged.pop(origin, []):
            block.buf[offset:offset + len(data)] = data
        return TransportResult(OK)

    def _discard_staged(self, win: Window, target: int, origin: int):
        block = win.blocks.get(target)
        if block is not None:
            block.staged.pop(origin, None)

    def cas(self, win: Window, target: int, offset: int, compare: int,
            swap: int) -> TransportResult:
        """Atomic 8-byte compare-and-swap on committed memory; returns the
        value found (result.value).  Completes immediately, no flush needed."""
        self._enter()
        self._check_open(win)
        me = self._caller()
        detail = dict(win=win.id, target=target, off=offset,
                      compare=compare, swap=swap)
        self.counters["msgs"] += 1
        self.counters["bytes"] += 8
        if offset % 8 != 0:
            raise BadOffset(f"cas offset {offset} is not 8-byte aligned")
        if win.revoked:
            return self._finish("cas", TransportResult(REVOKED), **detail)
        self._require_epoch(win, me, target)
        if not self.alive(target):
            if self.fidelity == FIDELITY_SPEC:
                res = TransportResult(PROC_FAILED, failed_rank=target)
            else:
                res = self._hang(win, target)
            return self._finish("cas", res, **detail)
        block = win.blocks.get(target)
        if block is None:
            return self._finish("cas", TransportResult(PROC_FAILED, failed_rank=target),
                                **detail)
        if offset + 8 > len(block.buf):
            return self._finish("cas", TransportResult(OUT_OF_RANGE), **detail)
        prior = int.from_bytes(block.buf[offset:offset + 8], "little", signed=True)
        if prior == compare:
            block.buf[offset:offset + 8] = swap.to_bytes(8, "little", signed=True)
        return self._finish("cas", TransportResult(OK, value=prior), **detail)

    def _dead_target_sync(self, win: Window, target: int) -> TransportResult:
        if self.fidelity == FIDELITY_SPEC:
            return TransportResult(PROC_FAILED, failed_rank=target)
        return self._hang(win, target)

    def _hang(self, win: Window, target: int) -> TransportResult:
        """Park T_HANG steps pretending to wait for a dead peer; a revoke of
        the window rescues the caller earlier."""
        task = self.sched.current
        win.hang_waiters.append(task)
        reason = self.sched.block(timeout=T_HANG,
                                  reason=f"osc call stalled on dead rank {target}")
        if task in win.hang_waiters:
            win.hang_waiters.remove(task)
        if reason in ("revoked", "freed"):
            return TransportResult(REVOKED)
        return TransportResult(HANG, failed_rank=target)

    # -- group operations ----------------------------------------------------

    def comm_revoke(self) -> TransportResult:
        """Invalidate the current generation: every pending and future
        revocable collective returns Revoked.  The escape hatch that pulls
        survivors out of barriers so they can converge on shrink."""
        self._enter()
        gen = self.world
        if not gen.revoked:
            gen.revoked = True
            self.world_revocations += 1
            for coll in self._collectives.values():
                if coll.gen is gen and not coll.done and not coll.immune:
                    coll.revoked = True
                    for task in coll.waiters:
                        self.sched.wake(task, "revoked")
                    coll.waiters.clear()
            for task in self._revoke_watchers:
                self.sched.wake(task, "revoked")
            self._revoke_watchers.clear()
        return self._finish("comm_revoke", TransportResult(OK))

    def wait_world_revoked(self, seen: int):
        """Idle-park until the revocation counter passes `seen`; used by
        drivers that finished their script but must keep joining recoveries."""
        if self.world_revocations > seen:
            return
        task = self.sched.current
        self._revoke_watchers.append(task)
        self.sched.block(weak=True, reason="idle until next revocation")
        if task in self._revoke_watchers:
            self._revoke_watchers.remove(task)

    def comm_shrink(self) -> WorldGeneration:
        """Collective over the current generation's live ranks; survivors get
        the next generation with order-preserving renumbering.  Proceeds under
        revocation, and member deaths during the call shrink the result."""
        self._enter()
        gen = self.world
        new_gen = self._collective(("shrink", gen.index), "comm_shrink", True,
                                   immune=True, finish=self._finish_shrink)
        self._emit("comm_shrink", OK, live=list(new_gen.live))
        self.sched.yield_now()
        return new_gen

    def _finish_shrink(self, coll: _Collective) -> WorldGeneration:
        old = coll.gen
        live = [r for r in old.live if self.alive(r)]
        gen = WorldGeneration(old.index + 1, live, {r: i for i, r in enumerate(live)})
        self.generations.append(gen)
        return gen

    def comm_agree(self, flags: int) -> int:
        """Fault-tolerant agreement: bitwise AND over the contributions of the
        ranks still alive when the call completes.  Consecutive agreements are
        numbered per rank; the collective-call-order contract keeps the
        numbering aligned across ranks."""
        self._enter()
        gen = self.world
        seq_key = (self._caller(), gen.index)
        seq = self._agree_seq.get(seq_key, 0)
        self._agree_seq[seq_key] = seq + 1
        agreed = self._collective(("agree", seq, gen.index), "comm_agree", flags,
                                  immune=True, finish=self._finish_agree)
        self._emit("comm_agree", OK, agreed=agreed)
        self.sched.yield_now()
        return agreed

    def _finish_agree(self, coll: _Collective) -> int:
        out = None
        for rank, flags in sorted(coll.arrived.items()):
            if not self.alive(rank):
                continue
            out = flags if out is None else (out & flags)
        return 0 if out is None else out

    def barrier(self, tag) -> TransportResult:
        """Plain revocable barrier over the current generation's live ranks."""
        self._enter()
        try:
            self._collective(("barrier", tag), "barrier", True,
                             immune=False, finish=lambda coll: True)
        except Revoked:
            res = TransportResult(REVOKED)
            self._emit("barrier", REVOKED, tag=str(tag))
            self.sched.yield_now()
            return res
        self._emit("barrier", OK, tag=str(tag))
        self.sched.yield_now()
        return TransportResult(OK)

    def _collective(self, key, op: str, contribution, immune: bool,
                    finish: Callable):
        """Arrive, wait until every live rank of the generation has arrived,
        return the shared result.  Deaths excuse the dead (completion is
        re-checked on every death).  Raises Revoked for revocable collectives
        interrupted by comm_revoke."""
        gen = self.world
        full_key = (key, gen.index)
        coll = self._collectives.get(full_key)
        if coll is None:
            coll = _Collective(full_key, op, key[1], gen, finish, immune)
            self._collectives[full_key] = coll
        if coll.done:
            raise CollectiveError(f"collective {full_key} reused after completion")
        if (coll.revoked or gen.revoked) and not immune:
            raise Revoked
        me = self._caller()
        if me in coll.arrived:
            raise CollectiveError(f"rank {me} arrived twice at {full_key}")
        coll.arrived[me] = contribution
        self._emit(op, "arrive", tag=str(key))
        self._try_complete(coll)
        if not coll.done:
            task = self.sched.current
            coll.waiters.append(task)
            missing = [r for r in coll.gen.live
                       if self.alive(r) and r not in coll.arrived]
            reason = self.sched.block(
                reason=f"collective {full_key}: {len(coll.arrived)} arrived, "
                       f"missing {missing}")
            if task in coll.waiters:
                coll.waiters.remove(task)
            if reason == "revoked":
                raise Revoked
        return coll.result

    def _try_complete(self, coll: _Collective):
        if coll.done:
            return
        live = [r for r in coll.gen.live if self.alive(r)]
        if live and all(r in coll.arrived for r in live):
            coll.result = coll.finish(coll)
            coll.done = True
            for task in coll.waiters:
                self.sched.wake(task, "complete")
            coll.waiters.clear()

    # -- local access (a rank touching its own block needs no epoch) ----------

    def local_write(self, win: Window, offset: int, data: bytes) -> TransportResult:
        self._enter()
        self._check_open(win)
        if win.revoked:
            return self._finish("local_write", TransportResult(REVOKED),
                                win=win.id, off=offset)
        me = self._caller()
        block = win.blocks.get(me)
        if block is None:
            raise TransportUsageError(f"rank {me} holds no block in w{win.id}")
        if offset < 0 or offset + len(data) > len(block.buf):
            return self._finish("local_write", TransportResult(OUT_OF_RANGE),
                                win=win.id, off=offset)
        block.buf[offset:offset + len(data)] = data
        return self._finish("local_write", TransportResult(OK), win=win.id,
                            off=offset, n=len(data))

    def local_read(self, win: Window, offset: int, nbytes: int) -> TransportResult:
        self._enter()
        self._check_open(win)
        if win.revoked:
            return self._finish("local_read", TransportResult(REVOKED),
                                win=win.id, off=offset)
        me = self._caller()
        block = win.blocks.get(me)
        if block is None:
            raise TransportUsageError(f"rank {me} holds no block in w{win.id}")
        if offset < 0 or offset + nbytes > len(block.buf):
            return self._finish("local_read", TransportResult(OUT_OF_RANGE),
                                win=win.id, off=offset)
        data = bytes(block.buf[offset:offset + nbytes])
        return self._finish("local_read", TransportResult(OK, data=data),
                            win=win.id, off=offset, n=nbytes)

    # -- event hook for the layers above ---------------------------------------

    def emit_event(self, op: str, outcome: str = OK, **detail):
        """Record a protocol-level event in the trace without consuming a step."""
        self._emit(op, outcome, **detail)

    # -- harness-only inspection (no steps, no trace) -------------------------

    def debug_block(self, win: Window, rank: int) -> bytes:
        return bytes(win.blocks[rank].buf)

    def debug_capacity(self, win: Window, rank: int) -> int:
        return len(win.blocks[rank].buf)
