"""Two-phase-commit transactions with coordinator backups.

A transaction is a list of operations:

    ("guard", key, expected)   commit only if the key currently holds
                               `expected` (None matches an empty entry)
    ("read", key)              return the current value with the outcome
    ("put", key, value)        write on commit
    ("delete", key)            clear on commit

The coordinator is always the lowest live rank.  Every transaction executes
on the coordinator's helper task, reached through its control mailbox even
when the coordinator submits to itself, so execution is serialized without
any locking.  Phase one evaluates guards and reads; the decision, together
with the values read, is then logged in one message to each live backup (the
next `backups` ranks) and acknowledged before a single write lands.  Phase
two applies the writes, which are idempotent, finalizes the log, and reports
the outcome to the submitter.

If the coordinator dies, the submitter rejoins recovery; the new coordinator
is the lowest surviving rank, which is exactly the first surviving backup.
It replays every logged-but-unfinalized commit before accepting new work, so
an interrupted transaction completes rather than half-applying, and a
resubmission of an already-decided transaction is answered from the log
instead of executing again.  The exactly-once guarantee therefore holds as
long as the coordinator and its backups do not all fail together; with
`backups=0` an in-flight transaction whose coordinator died is reported as
CoordinatorExhausted and deliberately not re-executed.

Transactional keys must not be written directly by their owners at the same
time (one logical writer per key); the transport's concurrent-writer monitor
flags violations.
"""

from __future__ import annotations

from typing import Optional

from . import transport as tp
from .store import MODE_NORMAL, S_REVOKED, Store, T_POLL, _fail

T_COMMITTED = "Committed"
T_ABORTED = "Aborted"
T_LOST = "CoordinatorLost"
T_EXHAUSTED = "CoordinatorExhausted"


class TxnResult:
    def __init__(self, outcome: str, txn_id=None, reads: Optional[dict] = None,
                 failed_rank: Optional[int] = None):
        self.outcome = outcome
        self.txn_id = txn_id
        self.reads = reads or {}
        self.failed_rank = failed_rank

    @property
    def decided(self) -> bool:
        return self.outcome in (T_COMMITTED, T_ABORTED, T_EXHAUSTED)

    def __repr__(self):
        return f"<TxnResult {self.outcome} id={self.txn_id}>"


class TxnManager:
    """Per-rank transaction endpoint: submitter, backup, and (when this rank
    is the lowest live one) executor."""

    def __init__(self, store: Store, log_disabled: bool = False):
        if store.cfg.mode != MODE_NORMAL:
            raise tp.TransportUsageError(
                "two-phase transactions run in normal mode; cas mode has its "
                "own entry-lock transactions")
        self.store = store
        self.tr = store.tr
        self.rank = store.rank
        self.log_disabled = log_disabled    # negative control for tests
        self.recovery = None                # backref, set by attach()
        self.seq = 0
        self.log: dict = {}                 # txn_id -> record (backup + own)
        self.queue: list = []               # submissions parked during recovery
        self.pending: dict = {}             # my unresolved submissions
        self.resolved: dict = {}            # txn_id -> TxnResult via phase hook
        self.kicks_sent = 0
        self.kicks_done = 0
        h = store.detector.handlers
        h[tp.TXN_SUBMIT] = self._on_submit
        h[tp.TXN_LOG_UPDATE] = self._on_log_update
        h[tp.TXN_FINALIZE] = self._on_finalize
        h[tp.TXN_KICK] = self._on_kick

    def attach(self, recovery_mgr):
        """Wire the mutual references with the recovery manager."""
        self.recovery = recovery_mgr
        recovery_mgr.txn = self
        return self

    # -- submitter side ------------------------------------------------------

    def coordinator(self) -> int:
        return self.store.gen.live[0]

    def submit(self, ops: list) -> TxnResult:
        """Send one transaction and wait for its outcome.  CoordinatorLost
        and Revoked results mean the caller must run recovery and then look
        in `resolved` (the recovery hook resubmits pending work)."""
        txn_id = (self.rank, self.seq)
        self.seq += 1
        self.pending[txn_id] = {"ops": list(ops), "delivered": False}
        res = self._send_and_wait(txn_id, ops)
        if res.decided:
            del self.pending[txn_id]
        return res

    def run(self, ops: list, recovery_mgr=None) -> TxnResult:
        """submit() plus the standard failure loop: join recovery and pick up
        the resubmitted outcome until the transaction is decided."""
        recovery_mgr = recovery_mgr or self.recovery
        res = self.submit(ops)
        while not res.decided:
            if res.outcome == T_LOST:
                recovery_mgr.handle_failure(res.failed_rank)
            else:
                recovery_mgr.join()
            done = self.resolved.pop(res.txn_id, None)
            if done is not None:
                res = done
        return res

    def phase_hook(self):
        """Resubmit unresolved transactions to the current coordinator; the
        recovery round calls this on every rank once the coordinator accepts
        work.  Results land in `resolved`."""
        for txn_id in sorted(self.pending):
            entry = self.pending[txn_id]
            if entry["delivered"] and self.store.cfg.backups == 0:
                # nobody can know whether it executed; refuse to guess
                self.resolved[txn_id] = TxnResult(T_EXHAUSTED, txn_id)
                del self.pending[txn_id]
                continue
            res = self._send_and_wait(txn_id, entry["ops"])
            if res.decided:
                self.resolved[txn_id] = res
                del self.pending[txn_id]

    def _send_and_wait(self, txn_id, ops) -> TxnResult:
        tr = self.tr
        coord = self.coordinator()
        res = tr.ctl_send(coord, tp.TXN_SUBMIT, id=txn_id, ops=list(ops))
        if not res.ok:
            return TxnResult(T_LOST, txn_id, failed_rank=coord)
        self.pending[txn_id]["delivered"] = True
        while True:
            msg = tr.ctl_wait(
                "main",
                lambda m: m.kind == tp.TXN_OUTCOME
                and tuple(m.payload["id"]) == txn_id,
                timeout=T_POLL)
            if msg is not None:
                return TxnResult(msg.payload["decision"], txn_id,
                                 reads=dict(msg.payload["reads"]))
            if tr.world.revoked:
                # a recovery round is forming; park the transaction and join
                return TxnResult(S_REVOKED, txn_id)
            if not self.store.detector.ping(coord):
                return TxnResult(T_LOST, txn_id, failed_rank=coord)

    # -- executor side (coordinator's helper) ---------------------------------

    def _on_submit(self, msg: tp.CtlMessage):
        if self.store.phase == "recovery":
            self.queue.append(msg)
            return
        self._execute(msg)

    def _on_kick(self, msg: tp.CtlMessage):
        """Coordinator takeover: replicate the inherited log, replay every
        unfinalized commit, then drain the submissions parked by recovery."""
        try:
            if msg.payload.get("replay"):
                self._replicate_log()
                for txn_id in sorted(self.log):
                    rec = self.log[txn_id]
                    if rec["decision"] == T_COMMITTED and not rec["finalized"]:
                        if not self._apply(rec):
                            continue        # converges via replay next round
                        self._finalize(rec)
            parked, self.queue = self.queue, []
            for m in parked:
                self._execute(m)
        finally:
            self.kicks_done += 1

    def _execute(self, msg: tp.CtlMessage):
        txn_id = tuple(msg.payload["id"])
        rec = self.log.get(txn_id)
        if rec is None:
            rec = self._decide(txn_id, msg.payload["ops"])
            if rec is None:
                return                      # revoked mid-decision; resubmitted later
            self.log[txn_id] = rec
            if not self._push_log(rec):
                return
            if rec["decision"] == T_COMMITTED:
                if not self._apply(rec):
                    return                  # converges via replay next round
            self._finalize(rec)
        elif not rec["finalized"]:
            # resubmission of an interrupted transaction: finish, don't redo
            if rec["decision"] == T_COMMITTED and not self._apply(rec):
                return
            self._finalize(rec)
        self.tr.ctl_send(msg.src, tp.TXN_OUTCOME, id=txn_id,
                         decision=rec["decision"], reads=dict(rec["reads"]))

    def _decide(self, txn_id, ops) -> Optional[dict]:
        """Phase one: evaluate guards and collect reads."""
        reads = {}
        decision = T_COMMITTED
        for op in ops:
            kind, key = op[0], tuple(op[1])
            if kind not in ("guard", "read"):
                continue
            res = self._read(key)
            if res.outcome == tp.REVOKED:
                return None
            if not res.ok:
                reads[self._kname(key)] = None
                decision = T_ABORTED
                continue
            reads[self._kname(key)] = res.value
            if kind == "guard" and res.value != op[2]:
                decision = T_ABORTED
        self.tr.emit_event("txn_decide", decision, id=list(txn_id))
        return {"id": txn_id, "ops": [tuple(o) for o in ops],
                "decision": decision, "reads": reads, "finalized": False}

    def _read(self, key):
        store = self.store
        bad = store._key_guard(key)
        if bad is not None:
            return bad
        bypass = store.phase == "txn" and store.txn_locked
        last = None
        for copy, target in enumerate(store.holders(key)):
            got = store.detector.guard(target)
            if got is not None:
                last = _fail(got)
                continue
            res = store.read_copy(key, copy, target,
                                  lock=False if bypass else None)
            if res.ok or res.outcome == tp.REVOKED:
                return res
            last = res
        return last

    def _apply(self, rec) -> bool:
        """Phase two: idempotent writes of the decided values."""
        store = self.store
        bypass = store.phase == "txn" and store.txn_locked
        for op in rec["ops"]:
            kind, key = op[0], tuple(op[1])
            if kind not in ("put", "delete"):
                continue
            if store._key_guard(key) is not None:
                continue                    # owner died with its keys
            value = op[2] if kind == "put" else b""
            targets = store.holders(key) if bypass else None
            res = store.write_copies(key, value, targets=targets)
            if not res.ok:
                self._trouble(res.failed_rank)
                return False
        return True

    def _push_log(self, rec) -> bool:
        """Replicate the decision record to every live backup, collecting
        acknowledgements; a backup that died is skipped."""
        if self.log_disabled:
            return True
        txn_id = rec["id"]
        waiting = []
        for b in self._backups():
            res = self.tr.ctl_send(b, tp.TXN_LOG_UPDATE, rec=_wire(rec))
            if res.ok:
                waiting.append(b)
            else:
                self._trouble(b, revoke=False)
        for b in waiting:
            if not self._await_ack(b, txn_id):
                self._trouble(b, revoke=False)
        return True

    def _await_ack(self, backup: int, txn_id) -> bool:
        while True:
            msg = self.tr.ctl_wait(
                "helper",
                lambda m: m.kind == tp.TXN_LOG_ACK and m.src == backup
                and tuple(m.payload["id"]) == txn_id,
                timeout=T_POLL)
            if msg is not None:
                return True
            if not self.store.detector.ping(backup):
                return False

    def _finalize(self, rec):
        rec["finalized"] = True
        if not self.log_disabled:
            for b in self._backups():
                self.tr.ctl_send(b, tp.TXN_FINALIZE, id=rec["id"])
        self.tr.emit_event("txn_final", rec["decision"], id=list(rec["id"]))

    def _replicate_log(self):
        if self.log_disabled:
            return
        for txn_id in sorted(self.log):
            rec = self.log[txn_id]
            for b in self._backups():
                res = self.tr.ctl_send(b, tp.TXN_LOG_UPDATE, rec=_wire(rec))
                if res.ok:
                    self._await_ack(b, txn_id)

    def _backups(self) -> list:
        live = self.store.gen.live
        return [r for r in live[1:1 + self.store.cfg.backups]
                if r != self.rank and self.tr.alive(r)]

    def _trouble(self, rank: Optional[int], revoke: bool = True):
        """A peer died under us mid-transaction; make sure a recovery round
        will run so the replay can converge the store."""
        if rank is not None:
            self.store.detector.suspected.add(rank)
        if revoke and self.recovery is not None:
            self.recovery.revoke_world()

    def on_coordinator_start(self, live: list):
        """Called by the recovery round on the new coordinator: the helper
        does the actual takeover work so execution stays single-threaded.
        The call returns only once the helper has drained the kick, so every
        replayed write lands while the coordinator still holds the restore
        locks (a revocation aborts the wait; the next round kicks again)."""
        self.kicks_sent += 1
        target = self.kicks_sent
        self.tr.ctl_send(self.rank, tp.TXN_KICK, replay=True)
        while self.kicks_done < target and not self.tr.world.revoked:
            self.tr.sched.sleep(1)

    # -- backup side -----------------------------------------------------------

    def _on_log_update(self, msg: tp.CtlMessage):
        rec = _unwire(msg.payload["rec"])
        mine = self.log.get(rec["id"])
        if mine is None or (rec["finalized"] and not mine["finalized"]):
            self.log[rec["id"]] = rec
        self.tr.ctl_send(msg.src, tp.TXN_LOG_ACK, id=rec["id"])

    def _on_finalize(self, msg: tp.CtlMessage):
        rec = self.log.get(tuple(msg.payload["id"]))
        if rec is not None:
            rec["finalized"] = True

    @staticmethod
    def _kname(key) -> str:
        return f"{key[0]}:{key[1]}"


def _wire(rec: dict) -> dict:
    """Detach a record for transfer so neither side aliases the other."""
    return {"id": tuple(rec["id"]), "ops": [tuple(o) for o in rec["ops"]],
            "decision": rec["decision"], "reads": dict(rec["reads"]),
            "finalized": rec["finalized"]}


def _unwire(rec: dict) -> dict:
    out = dict(rec)
    out["id"] = tuple(out["id"])
    return out
