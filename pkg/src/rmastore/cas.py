"""Entry-granular locking built on the transport's compare-and-swap.

In CAS mode every entry carries an 8-byte lock cell on its master copy
(between the size header and the payload).  -1 means free; any other value is
the original rank of the holder.  Acquisition is a bounded retry loop with
seeded randomized backoff, so contention resolves deterministically under the
simulation's scheduler.  A holder that died is forcibly dispossessed: the
ping says it is gone, and a second compare-and-swap moves the cell straight
from the dead rank to the caller.

Multi-key updates take their locks in ascending key order, which makes
deadlock impossible, and release in reverse.
"""

from __future__ import annotations

from .sim import derive_rng
from . import transport as tp
from .store import (
    LOCK_CELL, MODE_CAS, S_BUSY, S_OK, Store, StoreResult, _fail,
)

N_RETRY = 64          # acquisition rounds before giving up
BACKOFF_CAP = 32      # max steps of one backoff sleep

FREE = -1


def _check_mode(store: Store):
    if store.cfg.mode != MODE_CAS:
        raise tp.TransportUsageError("entry locks exist only in cas mode")


def lock_entry(store: Store, key) -> StoreResult:
    """Acquire the entry lock for `key`.  Busy after N_RETRY failed rounds;
    a dead holder is taken over as soon as a ping exposes it."""
    _check_mode(store)
    tr = store.tr
    me = store.rank
    win = store.window(key, 0)
    master = store.holders(key)[0]
    rng = derive_rng(tr.sched.seed, me, "backoff")
    for attempt in range(N_RETRY):
        res = tr.cas(win, master, LOCK_CELL, FREE, me)
        if not res.ok:
            return _fail(res)
        if res.value == FREE:
            tr.emit_event("lock_entry", S_OK, key=f"{key[0]}:{key[1]}",
                          attempts=attempt + 1)
            return StoreResult(S_OK)
        holder = res.value
        if store.cfg.ping and not store.detector.ping(holder):
            grab = tr.cas(win, master, LOCK_CELL, holder, me)
            if not grab.ok:
                return _fail(grab)
            if grab.value == holder:
                tr.emit_event("lock_takeover", S_OK, key=f"{key[0]}:{key[1]}",
                              dead_holder=holder)
                return StoreResult(S_OK)
            continue        # lost the takeover race; retry immediately
        tr.sched.sleep(rng.randrange(1, BACKOFF_CAP + 1))
    tr.emit_event("lock_entry", S_BUSY, key=f"{key[0]}:{key[1]}")
    return StoreResult(S_BUSY)


def unlock_entry(store: Store, key) -> StoreResult:
    """Release the entry lock.  A cell that no longer names the caller was
    reset by a recovery round in between; that is not an error."""
    _check_mode(store)
    tr = store.tr
    win = store.window(key, 0)
    master = store.holders(key)[0]
    res = tr.cas(win, master, LOCK_CELL, store.rank, FREE)
    if not res.ok:
        return _fail(res)
    if res.value != store.rank:
        tr.emit_event("unlock_stale", S_OK, key=f"{key[0]}:{key[1]}",
                      found=res.value)
    return StoreResult(S_OK)


def locked_put(store: Store, key, value: bytes) -> StoreResult:
    return _locked_ops(store, [("put", key, value)])


def locked_get(store: Store, key) -> StoreResult:
    res = _locked_ops(store, [("get", key)])
    if res.ok:
        res.value = res.values[key]
    return res


def locked_delete(store: Store, key) -> StoreResult:
    return _locked_ops(store, [("delete", key, b"")])


def transact(store: Store, ops: list) -> StoreResult:
    """Atomic multi-key operation: ops is a list of ("put", key, value),
    ("delete", key) or ("get", key) tuples.  All entry locks are taken in
    ascending key order before any effect; the result carries read values in
    `.values`."""
    return _locked_ops(store, ops)


def _locked_ops(store: Store, ops: list) -> StoreResult:
    guard = store._mode_guard()
    if guard is not None:
        return guard
    for op in ops:
        bad = store._key_guard(op[1])
        if bad is not None:
            return bad
    keys = sorted({op[1] for op in ops})
    held = []
    try:
        for key in keys:
            got = lock_entry(store, key)
            if not got.ok:
                return got
            held.append(key)
        values = {}
        for op in ops:
            kind, key = op[0], op[1]
            if kind == "get":
                res = store.read_copy(key, 0)
                if not res.ok:
                    return res
                values[key] = res.value
            elif kind in ("put", "delete"):
                payload = op[2] if kind == "put" else b""
                res = store.write_copies(key, payload)
                if not res.ok:
                    return res
                store.tr.emit_event(
                    "store_put" if kind == "put" else "store_delete",
                    S_OK, key=f"{key[0]}:{key[1]}", locked=True)
            else:
                raise ValueError(f"unknown op {kind!r}")
        return StoreResult(S_OK, values=values)
    finally:
        for key in reversed(held):
            unlock_entry(store, key)
