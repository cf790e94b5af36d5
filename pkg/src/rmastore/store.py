"""Replicated in-memory KV store over the one-sided transport.

Data model: each key (owner, slot) has R+1 copies, each copy its own window;
every rank contributes a block to every window, but only the placement-chosen
holder's block carries data.  An entry is a size header (8 bytes, unsigned
little-endian) followed by the value bytes.  In CAS mode bytes 8..16 of the
master block hold the entry lock cell and the value starts at 16; in normal
mode the value starts right after the header.

Writers are single per key by construction (the owner writes its own keys;
the recovery coordinator writes while everything is locked), so replication
is plain in-order write-through: master first, then each replica.  A failure
detected at copy i leaves copies < i new and copies >= i old, which recovery
reconciles.

All sizing knowledge is local: capacities are learned at window creation and
through enlargement acknowledgements; a stale table self-heals through the
OutOfRange -> enlargement round trip.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

from . import placement
from . import transport as tp
from .detector import Detector

HEADER = 8            # size header bytes
LOCK_CELL = 8         # cas mode: lock cell offset within the master block
CAS_PAYLOAD = 16      # cas mode: value offset
T_POLL = 32           # steps between pings while waiting for a reply

MODE_NORMAL = "normal"
MODE_CAS = "cas"
EPOCH_PER_COPY = "per_copy"
EPOCH_LOCK_ALL = "lock_all"

S_OK = tp.OK
S_FAILURE = "FailureDetected"
S_REVOKED = tp.REVOKED
S_HANG = tp.HANG
S_MODE = "ModeViolation"
S_DROPPED = "Dropped"
S_BUSY = "Busy"
S_UNSUPPORTED = "UnsupportedWithoutHelper"


class ConfigMismatch(RuntimeError):
    """Ranks disagreed on the store configuration at init."""


@dataclass(frozen=True)
class StoreConfig:
    replicas: int = 1
    slots: int = 1
    initial_capacity: int = 64
    mode: str = MODE_NORMAL
    ping: bool = True
    epoch: str = EPOCH_PER_COPY
    backups: int = 2

    def validate(self, procs: int):
        if self.mode not in (MODE_NORMAL, MODE_CAS):
            raise ValueError(f"bad mode {self.mode!r}")
        if self.epoch not in (EPOCH_PER_COPY, EPOCH_LOCK_ALL):
            raise ValueError(f"bad epoch discipline {self.epoch!r}")
        if self.replicas < 1:
            raise ValueError("at least one replica is required")
        if procs < self.replicas + 2:
            raise ValueError(f"need procs >= replicas+2 "
                             f"(procs={procs}, replicas={self.replicas})")
        if self.initial_capacity < CAS_PAYLOAD:
            raise ValueError("initial_capacity below the fixed entry overhead")
        if self.backups < 0:
            raise ValueError("backups must be >= 0")

    def digest(self) -> int:
        blob = json.dumps(self.__dict__, sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:7], "big")


@dataclass
class StoreResult:
    outcome: str
    value: Optional[bytes] = None
    failed_rank: Optional[int] = None
    values: Optional[dict] = None    # multi-key reads: key -> value

    @property
    def ok(self) -> bool:
        return self.outcome == S_OK


def _fail(res: tp.TransportResult) -> StoreResult:
    """Map a transport failure to the store-level outcome."""
    if res.outcome == tp.PROC_FAILED:
        return StoreResult(S_FAILURE, failed_rank=res.failed_rank)
    if res.outcome == tp.HANG:
        return StoreResult(S_HANG, failed_rank=res.failed_rank)
    if res.outcome == tp.OUT_OF_RANGE:
        raise tp.TransportUsageError("unexpected OutOfRange after enlargement")
    return StoreResult(S_REVOKED)


class Store:
    """One rank's view of the store.  All ranks construct it identically and
    the collective store_init wires up the shared windows."""

    def __init__(self, tr: tp.Transport, rank: int, cfg: StoreConfig,
                 detector: Optional[Detector] = None):
        cfg.validate(tr.n_procs)
        self.tr = tr
        self.rank = rank
        self.cfg = cfg
        self.detector = detector or Detector(tr, rank, enabled=cfg.ping)
        self.detector.handlers[tp.ENLARGE_REQUEST] = self._on_enlarge_request
        self.gen = tr.world
        self.windows: dict = {}     # (owner, slot, copy) -> Window
        self.capacity: dict = {}    # (owner, slot, copy) -> known capacity
        self.owners = list(range(tr.n_procs))
        self.dropped: set = set()   # keys orphaned by owner death
        self.phase = "normal"       # normal | recovery | txn
        self.coordinator: Optional[int] = None   # original rank, txn phase only
        self.txn_locked = False     # coordinator main holds every block lock
        self.rounds = 0             # completed recovery rounds

    # -- layout helpers ------------------------------------------------------

    @property
    def payload_off(self) -> int:
        return CAS_PAYLOAD if self.cfg.mode == MODE_CAS else HEADER

    def keys(self) -> list:
        return [(o, s) for o in self.owners for s in range(self.cfg.slots)
                if (o, s) not in self.dropped and o in self.gen.translation]

    def holders(self, key) -> list[int]:
        return placement.holders(self.gen, key[0], self.cfg.replicas)

    def window(self, key, copy: int) -> tp.Window:
        return self.windows[(key[0], key[1], copy)]

    def _needs_lock(self) -> bool:
        return self.cfg.mode == MODE_NORMAL and self.cfg.epoch == EPOCH_PER_COPY

    # -- init ------------------------------------------------------------

    def init(self):
        """Collective: config agreement, window creation (one per copy of
        every key, deterministic order), lock-cell initialization, epochs."""
        self._check_config()
        cap = self.cfg.initial_capacity
        for owner in self.owners:
            for slot in range(self.cfg.slots):
                for copy in range(self.cfg.replicas + 1):
                    tag = ("store", self.gen.index, owner, slot, copy)
                    win = self.tr.win_create(tag, capacity=cap)
                    if isinstance(win, tp.TransportResult):
                        raise tp.TransportUsageError("window creation revoked at init")
                    self.windows[(owner, slot, copy)] = win
                    self.capacity[(owner, slot, copy)] = cap
        if self.cfg.mode == MODE_CAS:
            self._init_lock_cells()
        if self.cfg.mode == MODE_CAS or self.cfg.epoch == EPOCH_LOCK_ALL:
            if self._open_epochs():
                raise tp.TransportUsageError("a rank died during store init")
        self.tr.barrier(("store_init", self.gen.index))
        self.tr.emit_event("store_init", S_OK, rank=self.rank)

    def _check_config(self):
        """Two agreements catch any divergence: AND leaves both a digest and
        its complement intact only when everyone contributed the same bits."""
        d = self.cfg.digest()
        mask = (1 << 56) - 1
        if self.tr.comm_agree(d) != d or self.tr.comm_agree(~d & mask) != (~d & mask):
            raise ConfigMismatch(f"rank {self.rank}: store configs differ across ranks")

    def _init_lock_cells(self):
        """Write the free marker (-1) into every master lock cell this rank
        hosts; fresh zeroed cells would read as 'held by rank 0'."""
        for key in self.keys():
            master = self.holders(key)[0]
            if master == self.rank:
                win = self.window(key, 0)
                self.tr.local_write(win, LOCK_CELL,
                                    (-1).to_bytes(8, "little", signed=True))

    def _open_epochs(self) -> list[int]:
        """Open a lock_all epoch on every window; returns ranks whose death
        prevented an epoch (recovery treats that as a dirty round)."""
        failed = []
        for wkey in sorted(self.windows):
            res = self.tr.win_lock_all(self.windows[wkey], nocheck=True)
            if not res.ok:
                failed.append(res.failed_rank if res.failed_rank is not None
                              else -1)
        return sorted(set(failed))

    # -- capacity ---------------------------------------------------------

    def _on_enlarge_request(self, msg: tp.CtlMessage):
        """Helper-side: grow the local block (never shrink), ack with the
        resulting capacity."""
        win = self.tr.windows[msg.payload["win"]]
        block = win.blocks.get(self.rank)
        if block is None:
            return
        needed = msg.payload["needed"]
        if needed > len(block.buf):
            grown = bytearray(max(needed, 2 * len(block.buf)))
            grown[:len(block.buf)] = block.buf
            block.buf = grown
        wkey = msg.payload.get("wkey")
        if wkey is not None:
            self.capacity[tuple(wkey)] = len(block.buf)
        self.tr.ctl_send(msg.src, tp.ENLARGE_ACK, win=win.id,
                         capacity=len(block.buf))

    def ensure_capacity(self, key, copy: int, needed: int) -> StoreResult:
        """Ask the holder's helper to enlarge its block to hold `needed`
        bytes.  Requires the helper machinery (ping enabled)."""
        wkey = (key[0], key[1], copy)
        if self.capacity.get(wkey, 0) >= needed:
            return StoreResult(S_OK)
        if not self.cfg.ping:
            return StoreResult(S_UNSUPPORTED)
        target = self.holders(key)[copy]
        win = self.windows[wkey]
        res = self.tr.ctl_send(target, tp.ENLARGE_REQUEST, win=win.id,
                               needed=needed, wkey=list(wkey))
        if not res.ok:
            return _fail(res)
        ack = self._await_reply(
            target, lambda m: m.kind == tp.ENLARGE_ACK and m.payload["win"] == win.id)
        if ack is None:
            return StoreResult(S_FAILURE, failed_rank=target)
        self.capacity[wkey] = ack.payload["capacity"]
        return StoreResult(S_OK)

    def _await_reply(self, counterpart: int, match) -> Optional[tp.CtlMessage]:
        """Wait for a control reply, pinging the counterpart every T_POLL
        steps so its death cannot strand us.  None means it died."""
        while True:
            msg = self.tr.ctl_wait("main", match, timeout=T_POLL)
            if msg is not None:
                return msg
            if not self.tr.ping(counterpart).ok:
                return None

    # -- entry encoding -------------------------------------------------------

    def encode_header(self, n: int) -> bytes:
        return n.to_bytes(HEADER, "little")

    def _writes_for(self, value: bytes) -> list:
        """(offset, bytes) puts for one entry.  Normal mode is a single
        contiguous write; CAS mode skips the lock cell."""
        header = self.encode_header(len(value))
        if self.cfg.mode == MODE_CAS:
            return [(0, header), (CAS_PAYLOAD, bytes(value))]
        return [(0, header + bytes(value))]

    # -- operations ----------------------------------------------------------

    def _mode_guard(self) -> Optional[StoreResult]:
        if self.phase == "txn" and self.rank != self.coordinator:
            return StoreResult(S_MODE)
        return None

    def _key_guard(self, key) -> Optional[StoreResult]:
        if key in self.dropped or key[0] not in self.gen.translation:
            return StoreResult(S_DROPPED)
        return None

    def put(self, key, value: bytes) -> StoreResult:
        """Write-through to all R+1 copies, master first.  Returns on the
        first failure; already-written copies stay (recovery's problem)."""
        guard = self._mode_guard() or self._key_guard(key)
        if guard is not None:
            return guard
        res = self.write_copies(key, value)
        self.tr.emit_event("store_put", res.outcome, key=f"{key[0]}:{key[1]}",
                           n=len(value))
        return res

    def write_copies(self, key, value: bytes, targets: Optional[list] = None,
                     indices: Optional[list] = None) -> StoreResult:
        """The raw replication loop, also used by recovery/commit paths that
        manage phases and locks themselves."""
        holders = targets if targets is not None else self.holders(key)
        needed = self.payload_off + len(value)
        take_lock = self._needs_lock() and targets is None
        for copy, target in enumerate(holders):
            if indices is not None and copy not in indices:
                continue
            got = self.detector.guard(target)
            if got is not None:
                return _fail(got)
            cap = self.ensure_capacity(key, copy, needed)
            if not cap.ok:
                return cap
            win = self.window(key, copy)
            if take_lock:
                res = self.tr.win_lock(win, target, tp.EXCLUSIVE)
                if not res.ok:
                    return _fail(res)
            res = self._write_entry(win, key, copy, target, value)
            if not res.ok:
                if take_lock and res.outcome != S_HANG:
                    self.tr.win_unlock(win, target)
                return res
            if take_lock:
                res = self.tr.win_unlock(win, target)
                if not res.ok:
                    return _fail(res)
        return StoreResult(S_OK)

    def _write_entry(self, win, key, copy, target, value: bytes) -> StoreResult:
        for offset, data in self._writes_for(value):
            res = self.tr.put(win, target, offset, data)
            if res.outcome == tp.OUT_OF_RANGE:
                # the capacity table lied high; forget it and re-learn
                self.capacity[(key[0], key[1], copy)] = 0
                grow = self.ensure_capacity(key, copy, self.payload_off + len(value))
                if not grow.ok:
                    return grow
                res = self.tr.put(win, target, offset, data)
            if not res.ok:
                return _fail(res)
        res = self.tr.flush(win, target)
        if not res.ok:
            return _fail(res)
        return StoreResult(S_OK)

    def get(self, key) -> StoreResult:
        """Read the master copy; fall back to replicas in placement order when
        the holder is unreachable.  value None means the entry is empty."""
        guard = self._mode_guard() or self._key_guard(key)
        if guard is not None:
            return guard
        last = StoreResult(S_FAILURE)
        for copy, target in enumerate(self.holders(key)):
            got = self.detector.guard(target)
            if got is not None:
                last = _fail(got)
                continue
            res = self.read_copy(key, copy, target)
            if res.ok or res.outcome == S_REVOKED:
                self.tr.emit_event("store_get", res.outcome,
                                   key=f"{key[0]}:{key[1]}")
                return res
            last = res
        self.tr.emit_event("store_get", last.outcome, key=f"{key[0]}:{key[1]}")
        return last

    def read_copy(self, key, copy: int, target: Optional[int] = None,
                  lock: Optional[bool] = None) -> StoreResult:
        """Read one copy.  `lock=False` lets a caller that already holds the
        block lock (the recovery coordinator) skip the epoch."""
        if target is None:
            target = self.holders(key)[copy]
        win = self.window(key, copy)
        take_lock = self._needs_lock() if lock is None else lock
        if take_lock:
            res = self.tr.win_lock(win, target, tp.SHARED)
            if not res.ok:
                return _fail(res)
        out = self._read_entry(win, target)
        if take_lock:
            unlock = self.tr.win_unlock(win, target)
            if out.ok and not unlock.ok:
                out = _fail(unlock)
        return out

    def _read_entry(self, win, target: int) -> StoreResult:
        res = self.tr.get(win, target, 0, HEADER)
        if not res.ok:
            return _fail(res)
        fl = self.tr.flush(win, target)
        if not fl.ok:
            return _fail(fl)
        n = int.from_bytes(res.data, "little")
        if n == 0:
            return StoreResult(S_OK, value=None)
        res = self.tr.get(win, target, self.payload_off, n)
        if res.outcome == tp.OUT_OF_RANGE:
            # torn header from a concurrent death; treat as unreadable copy
            return StoreResult(S_FAILURE, failed_rank=target)
        if not res.ok:
            return _fail(res)
        fl = self.tr.flush(win, target)
        if not fl.ok:
            return _fail(fl)
        return StoreResult(S_OK, value=res.data)

    def delete(self, key) -> StoreResult:
        """A delete is a put of the empty entry: header zero, value gone."""
        guard = self._mode_guard() or self._key_guard(key)
        if guard is not None:
            return guard
        res = self.write_copies(key, b"")
        self.tr.emit_event("store_delete", res.outcome, key=f"{key[0]}:{key[1]}")
        return res

    # -- audit (harness-only, reads memory directly) ---------------------------

    def audit_records(self) -> list[dict]:
        """Per-key snapshot for the oracle: holders, per-copy header and
        payload digest, and whether all copies agree byte-for-byte."""
        records = []
        for key in sorted(self.keys()):
            holders = self.holders(key)
            entries = []
            for copy, target in enumerate(holders):
                win = self.window(key, copy)
                raw = self.tr.debug_block(win, target)
                n = int.from_bytes(raw[:HEADER], "little")
                payload = bytes(raw[self.payload_off:self.payload_off + n])
                entries.append((n, payload))
            n0, payload0 = entries[0]
            records.append({
                "key": f"{key[0]}:{key[1]}",
                "holders": holders,
                "header": n0,
                "digest": hashlib.sha256(payload0).hexdigest(),
                "consistent": all(e == entries[0] for e in entries),
            })
        return records

    def debug_value(self, key) -> Optional[bytes]:
        """Master-copy value straight from memory (tests only)."""
        target = self.holders(key)[0]
        win = self.window(key, 0)
        raw = self.tr.debug_block(win, target)
        n = int.from_bytes(raw[:HEADER], "little")
        return bytes(raw[self.payload_off:self.payload_off + n]) if n else None
