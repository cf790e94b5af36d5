"""Failure recovery: revoke, shrink, rebuild, restore, resume.

Any rank that detects a failure revokes every window plus the world, which
pulls all survivors out of whatever they were blocked on.  Everyone then joins
rounds of a fixed collective sequence:

  shrink -> agree on the failure set -> drop orphaned keys -> rebuild the
  window layout for the shrunken world (reusing surviving bytes in place) ->
  restore replication -> resume.

In normal mode the restore is coordinator-serialized: the lowest surviving
rank locks every block, repairs each key from its best surviving copy (the
master copy when its holder survived, otherwise the lowest-index survivor),
then serves transactions until every other survivor has sent its exit intent.
In CAS mode there is no transaction phase; the coordinator repairs entries
under their own locks and everyone meets at a resume barrier.

A failure that strikes during a round makes the round dirty: survivors finish
the sequence best-effort, agree that it was dirty, and immediately run another
round.  join() only returns after a round every survivor agreed was clean.
"""

from __future__ import annotations

from typing import Callable, Optional

from . import placement
from . import transport as tp
from .store import (
    EPOCH_LOCK_ALL, MODE_CAS, MODE_NORMAL, Store, T_POLL,
)


class RecoveryError(RuntimeError):
    """Recovery invoked in a configuration that cannot support it."""


class RecoveryManager:
    """Drives recovery rounds for one rank.  The transaction manager (when
    present) plugs itself in via `txn`; the driver may provide `on_txn_phase`,
    invoked once per round while the coordinator is accepting transactions."""

    def __init__(self, store: Store):
        self.store = store
        self.tr = store.tr
        self.rank = store.rank
        self.txn = None
        self.on_txn_phase: Optional[Callable] = None
        self.dirty = False
        self.consumed_revocations = 0
        self.report = {"rounds": 0, "lost_ranks": [], "dropped_keys": [],
                       "data_loss": []}

    # -- entry points ------------------------------------------------------

    def handle_failure(self, failed_rank: Optional[int] = None) -> dict:
        """Initiate recovery after detecting a failure, then join."""
        if failed_rank is not None and failed_rank >= 0:
            self.store.detector.suspected.add(failed_rank)
        self.revoke_world()
        return self.join()

    def revoke_world(self):
        """Wake every survivor: revoke all windows, then the world."""
        if not self.tr.world.revoked:
            for wkey in sorted(self.store.windows):
                self.tr.win_revoke(self.store.windows[wkey])
            self.tr.comm_revoke()

    def join(self) -> dict:
        """Run recovery rounds until one completes cleanly everywhere."""
        if not self.store.cfg.ping:
            raise RecoveryError("recovery needs the helper machinery; "
                                "it is disabled (ping=False)")
        store = self.store
        while True:
            store.phase = "recovery"
            self.dirty = False
            if self._round():
                break
        store.phase = "normal"
        store.coordinator = None
        self.tr.emit_event("recovery_done", tp.OK, rounds=self.report["rounds"])
        return self.report

    # -- one round ----------------------------------------------------------

    def _round(self) -> bool:
        tr, store = self.tr, self.store
        gen_before = store.gen
        new_gen = tr.comm_shrink()
        # every participant passes this point together; revocations counted
        # so far are the ones this round consumes, anything later wakes the
        # idle waiters again
        self.consumed_revocations = tr.world_revocations
        self.report["rounds"] += 1
        if new_gen.size < store.cfg.replicas + 2:
            raise RecoveryError(
                f"{new_gen.size} survivors cannot carry "
                f"{store.cfg.replicas + 1} copies plus a distinct owner")

        # agree on the failure set: each rank contributes a bitmap of the
        # shrink survivors it does not suspect; the AND is the agreed world
        view = 0
        for r in new_gen.live:
            if r not in store.detector.suspected:
                view |= 1 << r
        agreed = tr.comm_agree(view)
        condemned = [r for r in new_gen.live if not agreed >> r & 1]
        if condemned:
            self.dirty = True        # died (or was suspected) mid-transition
        lost = [r for r in gen_before.live if r not in new_gen.live]
        self.report["lost_ranks"].append(lost)

        # keys owned by the dead are unrecoverable by construction
        dead_owners = set(lost)
        orphans = sorted(k for k in store.keys() if k[0] in dead_owners)
        store.dropped.update(orphans)
        self.report["dropped_keys"].extend(f"{o}:{s}" for o, s in orphans)

        if not self._rebuild(new_gen):
            return False
        coordinator = new_gen.live[0]
        if store.cfg.mode == MODE_NORMAL:
            done = self._normal_restore(gen_before, new_gen, coordinator)
        else:
            done = self._cas_restore(gen_before, coordinator)
        if not done:
            return False

        clean = not self.dirty and not (store.detector.suspected
                                        & set(new_gen.live))
        return bool(tr.comm_agree(1 if clean else 0) & 1)

    def _rebuild(self, new_gen) -> bool:
        """Free the old layout and register the new one, handing each
        surviving byte buffer straight back in.  Data moves later; here only
        the window structure changes."""
        tr, store = self.tr, self.store
        old = dict(store.windows)
        buffers = {wkey: win.blocks[self.rank].buf for wkey, win in old.items()}
        for wkey in sorted(old):
            tr.win_free(old[wkey])
        store.windows = {}
        store.capacity = {}
        store.gen = new_gen
        cap = store.cfg.initial_capacity
        for owner in store.owners:
            if owner not in new_gen.translation:
                continue
            for slot in range(store.cfg.slots):
                for copy in range(store.cfg.replicas + 1):
                    wkey = (owner, slot, copy)
                    tag = ("store", new_gen.index, owner, slot, copy)
                    win = tr.win_create(tag, capacity=cap,
                                        buffer=buffers.get(wkey))
                    if isinstance(win, tp.TransportResult):
                        return False        # revoked again: next round
                    store.windows[wkey] = win
                    store.capacity[wkey] = cap
        if store.cfg.mode == MODE_CAS:
            store._init_lock_cells()
        if store.cfg.mode == MODE_CAS or store.cfg.epoch == EPOCH_LOCK_ALL:
            if store._open_epochs():
                # someone died under the epoch opening; structure is unusable
                # this round, so agree it dirty and rebuild again
                self.dirty = True
                return True
        res = tr.barrier(("rebuild", new_gen.index))
        return res.ok

    # -- normal mode: serialized restore plus a transaction phase -----------

    def _normal_restore(self, gen_before, new_gen, coordinator: int) -> bool:
        tr, store = self.tr, self.store
        store.coordinator = coordinator
        if self.rank == coordinator:
            acquired = None
            if not self.dirty:
                acquired = self._lock_everything()
                if acquired is None:
                    return False            # revoked while locking
                if not self._repair(gen_before):
                    return False
            store.txn_locked = bool(acquired)
            store.phase = "txn"
            if self.txn is not None:
                self.txn.on_coordinator_start(new_gen.live)
                self.txn.phase_hook()
            if self.on_txn_phase is not None:
                self.on_txn_phase(self)
            served = self._serve_exits(new_gen.live)
            store.txn_locked = False
            if not served:
                return False
            if acquired is not None:
                for win, target in reversed(acquired):
                    self.tr.win_unlock(win, target)
        else:
            store.phase = "txn"
            if self.txn is not None:
                self.txn.phase_hook()
            if self.on_txn_phase is not None:
                self.on_txn_phase(self)
            res = tr.ctl_send(coordinator, tp.EXIT_INTENT, gen=new_gen.index)
            if not res.ok:
                store.detector.suspected.add(coordinator)
                self.dirty = True
        res = tr.barrier(("recovery_exit", new_gen.index))
        return res.ok

    def _lock_everything(self):
        """Exclusive locks on every block ahead of the serialized restore
        (only the per-copy discipline uses block locks at all)."""
        store = self.store
        acquired = []
        if not store._needs_lock():
            return acquired
        for wkey in sorted(store.windows):
            owner, slot, copy = wkey
            target = store.holders((owner, slot))[copy]
            res = self.tr.win_lock(store.windows[wkey], target, tp.EXCLUSIVE)
            if res.ok:
                acquired.append((store.windows[wkey], target))
            elif res.outcome == tp.REVOKED:
                return None
            else:
                self._suspect(res.failed_rank)
        return acquired

    def _repair(self, gen_before) -> bool:
        """Bring every key back to full replication from its best surviving
        copy.  Copies whose holder kept its block are compared and rewritten
        only when they differ; moved or fresh copies are always written."""
        for key in sorted(self.store.keys()):
            if not self._repair_one(gen_before, key):
                return False
        return True

    def _serve_exits(self, live: list) -> bool:
        """Coordinator side of the transaction phase: accept work (the helper
        executes it) until every other survivor has said it is done."""
        tr, store = self.tr, self.store
        gen_index = store.gen.index
        pending = set(live) - {self.rank} - store.detector.suspected
        while pending:
            if tr.world.revoked:
                return False
            msg = tr.ctl_wait(
                "main",
                lambda m: m.kind == tp.EXIT_INTENT
                and m.payload.get("gen") == gen_index,
                timeout=T_POLL)
            if msg is not None:
                pending.discard(msg.src)
                continue
            for r in sorted(pending):
                if not store.detector.ping(r):
                    pending.discard(r)
                    self.dirty = True
        return True

    # -- cas mode: restore under entry locks ---------------------------------

    def _cas_restore(self, gen_before, coordinator: int) -> bool:
        from . import cas               # local import; cas builds on store
        tr, store = self.tr, self.store
        if self.rank == coordinator and not self.dirty:
            for key in sorted(store.keys()):
                got = cas.lock_entry(store, key)
                if got.outcome == tp.REVOKED:
                    return False
                if not got.ok:                  # dead holder mid-round
                    self._suspect(got.failed_rank)
                    continue
                ok = self._repair_one(gen_before, key)
                cas.unlock_entry(store, key)
                if not ok:
                    return False
        res = tr.barrier(("resume", store.gen.index))
        return res.ok

    def _repair_one(self, gen_before, key) -> bool:
        """Repair one key; False means the round was revoked under us."""
        tr, store = self.tr, self.store
        replicas = store.cfg.replicas
        old_holders = placement.holders(gen_before, key[0], replicas)
        new_holders = store.holders(key)
        alive_old = [c for c, h in enumerate(old_holders) if tr.alive(h)]
        if not alive_old:
            self.report["data_loss"].append(f"{key[0]}:{key[1]}")
            tr.emit_event("data_loss", "DataLoss", key=f"{key[0]}:{key[1]}")
            return True
        winner = 0 if tr.alive(old_holders[0]) else alive_old[0]
        # a kept winner sits under the locks already held; a moved one lives
        # in a block nobody locked, so take the normal shared epoch for it
        winner_lock = None if old_holders[winner] != new_holders[winner] else False
        best = store.read_copy(key, winner, target=old_holders[winner],
                               lock=winner_lock)
        if best.outcome == tp.REVOKED:
            return False
        if not best.ok:
            self._suspect(best.failed_rank)
            return True
        value = best.value if best.value is not None else b""
        for copy in range(replicas + 1):
            kept = (old_holders[copy] == new_holders[copy] and copy in alive_old)
            if kept:
                cur = store.read_copy(key, copy, target=new_holders[copy],
                                      lock=False)
                if cur.outcome == tp.REVOKED:
                    return False
                if cur.ok and cur.value == best.value:
                    continue
            res = store.write_copies(key, value, targets=new_holders,
                                     indices=[copy])
            if res.outcome == tp.REVOKED:
                return False
            if not res.ok:
                self._suspect(res.failed_rank)
        return True

    def _suspect(self, rank: Optional[int]):
        self.dirty = True
        if rank is not None and rank >= 0:
            self.store.detector.suspected.add(rank)
