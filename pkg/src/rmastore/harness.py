"""Scenario runner, exhaustive 2PC failure-injection checker, and the
put-cost bench.

Everything here drives complete simulated worlds: one scheduler, one
transport, and per rank a helper task plus a driver task that executes the
rank's share of the schedule.  Drivers treat schedule steps as earliest issue
times, retry operations that failed because of a peer's death after joining
recovery, and park as idle members once their script ends so late recovery
rounds always find a full quorum.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import defaultdict
from typing import Optional

from . import cas
from . import scenario as sc
from . import transport as tp
from .detector import Detector
from .recovery import RecoveryManager
from .sim import Scheduler
from .store import (
    CAS_PAYLOAD, HEADER, MODE_CAS, MODE_NORMAL, S_BUSY, S_DROPPED, S_MODE,
    S_OK, S_UNSUPPORTED, Store, StoreConfig, StoreResult, _fail,
)
from .txn import T_ABORTED, T_COMMITTED, T_EXHAUSTED, TxnManager

log = logging.getLogger(__name__)

RETRIES = 6     # recover-and-retry attempts per scheduled operation

TERMINAL = (S_OK, S_DROPPED, S_MODE, S_UNSUPPORTED)


def idle_member(store, mgr):
    """Park a rank that finished its own script but must keep joining
    recovery rounds whenever the world is revoked.  Never returns; the
    scheduler reaps the task once every strong task is done."""
    seen = mgr.consumed_revocations
    while True:
        store.tr.wait_world_revoked(seen)
        mgr.join()
        seen = mgr.consumed_revocations


def settle(store, mgr, last_step: int):
    """Converge the membership once the schedule is over: wait until every
    scripted step and scheduled kill has fired, rendezvous, then ping-sweep
    the generation.  Deaths nobody happened to touch during the run are
    detected here and recovered collectively, so the final audit always reads
    a world whose membership matches who is actually alive."""
    tr = store.tr
    tr.sched.wait_until_step(last_step + 1)
    while True:
        # sweep before the rendezvous: a rank blocked behind a dead lock
        # holder can only arrive once somebody revokes on its behalf
        dead = [r for r in store.gen.live
                if r != store.rank and not tr.ping(r).ok]
        if dead:
            mgr.handle_failure(dead[0])
            continue
        res = tr.barrier(("settle",))
        if res.ok:
            return
        mgr.join()


# -- scenario execution --------------------------------------------------------

def run_scenario(doc, trace_path: Optional[str] = None,
                 audit_path: Optional[str] = None, seed: Optional[int] = None,
                 fidelity: Optional[str] = None) -> tuple[int, dict]:
    """Run one scenario; returns (exit_code, report).  Exit 0 means every
    embedded expectation held, 1 means at least one failed.  Parse and
    validation problems raise ScenarioError before anything runs."""
    if isinstance(doc, str):
        doc = sc.load_scenario(doc)
    else:
        doc = sc.validate(doc)
    seed = doc["seed"] if seed is None else seed
    fidelity = doc["fidelity"] if fidelity is None else fidelity
    procs = doc["procs"]
    cfg = StoreConfig(**doc.get("config", {}))

    events: list = []
    sched = Scheduler(seed=seed)
    tr = tp.Transport(sched, procs, fidelity=fidelity, trace=events.append)
    per_rank = defaultdict(list)
    for act in doc["schedule"]:
        if act["action"] == "kill":
            sched.schedule_kill(act["rank"], act["step"])
        else:
            per_rank[act["rank"]].append(act)

    last_step = max((a["step"] for a in doc["schedule"]), default=0)
    oplog: list = []
    stores: dict = {}
    mgrs: dict = {}
    for r in range(procs):
        det = Detector(tr, r, enabled=cfg.ping)
        store = stores[r] = Store(tr, r, cfg, det)
        mgr = mgrs[r] = RecoveryManager(store)
        txn = TxnManager(store).attach(mgr) if cfg.mode == MODE_NORMAL else None

        def make_helper(store=store):
            def helper():
                store.detector.helper_loop()
            return helper

        def make_main(rank=r, store=store, mgr=mgr, txn=txn):
            def main():
                store.init()
                for act in per_rank[rank]:
                    sched.wait_until_step(act["step"])
                    entry = _perform(act, store, mgr, txn, seed, sched)
                    entry["rank"] = rank
                    oplog.append(entry)
                settle(store, mgr, last_step)
                idle_member(store, mgr)
            return main

        sched.spawn(f"p{r}.helper", r, "helper", make_helper())
        sched.spawn(f"p{r}.driver", r, "main", make_main())

    crash = None
    try:
        sched.run()
    except Exception as exc:          # surfaced honestly as a failed check
        crash = exc

    report = _evaluate(doc, stores, mgrs, tr, oplog, crash, seed)
    if trace_path:
        _write_lines(trace_path,
                     (json.dumps(ev, sort_keys=True) for ev in events))
    if audit_path:
        _write_lines(audit_path, report["audit"])
    code = 0 if all(ok for _, ok, _ in report["checks"]) else 1
    log.info("scenario %s: %d ops, %d hangs, %d recovery rounds -> exit %d",
             "ok" if code == 0 else "FAILED", len(report["ops"]),
             report["hangs"], report["rounds"], code)
    return code, report


def _perform(act, store, mgr, txn, seed: int, sched) -> dict:
    name = act["action"]
    step = act["step"]
    if name == "txn":
        ops = [_resolve_op(op, seed, step) for op in act["ops"]]
        res = txn.run(ops, mgr)
        return {"step": step, "action": "txn", "outcome": res.outcome,
                "ok": res.outcome == T_COMMITTED, "reads": res.reads}

    key = tuple(act["key"])
    value = None
    if name == "put":
        if "text" in act:
            value = act["text"].encode()
        else:
            value = sc.payload_bytes(seed, key, step, act["size"])
    locked = store.cfg.mode == MODE_CAS      # same verbs, entry-lock discipline
    attempts = 0
    while True:
        attempts += 1
        if name == "put" and act.get("kill_after_ping") and attempts == 1:
            res = _race_put(store, sched, key, value)
        elif name == "put":
            res = cas.locked_put(store, key, value) if locked \
                else store.put(key, value)
        elif name == "get":
            res = cas.locked_get(store, key) if locked else store.get(key)
        else:
            res = cas.locked_delete(store, key) if locked \
                else store.delete(key)
        if res.outcome in TERMINAL or attempts > RETRIES:
            break
        if res.outcome == S_BUSY:
            continue                         # contention, not failure
        mgr.handle_failure(res.failed_rank)
    entry = {"step": step, "action": name, "key": sc.kname(key),
             "outcome": res.outcome, "ok": res.ok, "attempts": attempts}
    if name == "put":
        entry["value"] = value
    if name == "get":
        entry["value"] = res.value
    return entry


def _race_put(store, sched, key, value: bytes) -> StoreResult:
    """A put whose target dies between the liveness ping and the one-sided
    access: the documented residual race of the ping workaround.  In
    real-osc fidelity this is the one access that still hangs."""
    master = store.holders(key)[0]
    if master == store.rank:
        return StoreResult(S_UNSUPPORTED)
    if store.detector.guard(master) is not None:    # already dead: no race
        return StoreResult(S_UNSUPPORTED)
    sched.kill_now(master)
    win = store.window(key, 0)
    if store._needs_lock():
        res = store.tr.win_lock(win, master, tp.EXCLUSIVE)
        if not res.ok:
            return _fail(res)
    res = store.tr.put(win, master, 0,
                       store.encode_header(len(value)) + value)
    if res.ok:
        res = store.tr.flush(win, master)
    if store._needs_lock() and res.ok:
        store.tr.win_unlock(win, master)
    return _fail(res) if not res.ok else StoreResult(S_OK)


def _resolve_op(op, seed: int, step: int):
    kind, key = op[0], tuple(op[1])
    if kind in ("guard", "put"):
        return (kind, key, sc.resolve_value(op[2], seed, key, step))
    return (kind, key)


def _evaluate(doc, stores, mgrs, tr, oplog, crash, seed) -> dict:
    procs = doc["procs"]
    expect = doc["expect"]
    alive = [r for r in range(procs) if tr.alive(r)]
    auditor = stores[alive[0]]
    audit_lines = build_audit(auditor, mgrs[alive[0]])
    records = auditor.audit_records()
    hangs = tr.counters["hangs"]
    rounds = max(m.report["rounds"] for m in mgrs.values())

    checks = [("run completed", crash is None,
               repr(crash) if crash else "")]
    want_hangs = expect.get("hangs", 0)
    checks.append(("hangs", hangs == want_hangs,
                   f"saw {hangs}, expected {want_hangs}"))
    if "consistent" in expect:
        consistent = all(rec["consistent"] for rec in records)
        checks.append(("replicas consistent",
                       consistent == expect["consistent"],
                       f"saw {consistent}"))
    if "dropped" in expect:
        got = sorted(sc.kname(k) for k in auditor.dropped)
        checks.append(("dropped keys", got == sorted(expect["dropped"]),
                       f"saw {got}"))
    for kn, spec in expect.get("values", {}).items():
        owner, slot = map(int, kn.split(":"))
        key = (owner, slot)
        if key in auditor.dropped or owner not in auditor.gen.translation:
            checks.append((f"value {kn}", False, "key was dropped"))
            continue
        actual = auditor.debug_value(key)
        allowed = spec["any_of"] if isinstance(spec, dict) and "any_of" in spec \
            else [spec]
        admissible = [sc.resolve_value(alt, seed, key, 0) for alt in allowed]
        checks.append((f"value {kn}", actual in admissible,
                       f"saw {_digest(actual)}"))

    return {"checks": checks, "hangs": hangs, "rounds": rounds,
            "counters": dict(tr.counters), "audit": audit_lines,
            "ops": [_strip(e) for e in oplog]}


def build_audit(store, mgr) -> list[str]:
    """Line-delimited, mode-agnostic audit: one record per surviving key in
    sorted order, then the dropped-key and data-loss trailers."""
    lines = [json.dumps(rec, sort_keys=True) for rec in store.audit_records()]
    lines.append(json.dumps(
        {"dropped": sorted(sc.kname(k) for k in store.dropped)}))
    lines.append(json.dumps({"data_loss": sorted(mgr.report["data_loss"])}))
    return lines


def sequential_oracle(doc) -> dict:
    """Final key -> value map a single sequential interpreter produces; the
    reference for failure-free runs (schedule order, last write wins)."""
    doc = sc.validate(doc)
    state: dict = {}
    for act in sorted(doc["schedule"], key=lambda a: (a["step"], a["rank"])):
        if act["action"] == "put":
            key = tuple(act["key"])
            if "text" in act:
                value = act["text"].encode()
            else:
                value = sc.payload_bytes(doc["seed"], key, act["step"],
                                         act["size"])
            state[key] = value or None      # an empty put equals a delete
        elif act["action"] == "delete":
            state[tuple(act["key"])] = None
    return state


def _strip(entry: dict) -> dict:
    out = dict(entry)
    if "value" in out:
        out["value"] = _digest(out.pop("value"))
    if "reads" in out:
        out["reads"] = {k: _digest(v) for k, v in out["reads"].items()}
    return out


def _digest(value: Optional[bytes]) -> Optional[dict]:
    if value is None:
        return None
    return {"len": len(value),
            "sha256": hashlib.sha256(value).hexdigest()[:16]}


def _write_lines(path: str, lines):
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")


# -- exhaustive 2PC failure injection ------------------------------------------

def check_2pc(max_p: int = 5, max_r: int = 2, max_keys: int = 3,
              log_disabled: bool = False, seed: int = 0) -> dict:
    """Enumerate every single-kill injection point across the protocol window
    of a fixed multi-key transaction, for every world shape within bounds.

    The transaction guards its first key against emptiness and then writes
    every key, so a second execution aborts on its own earlier write: the
    reported outcome alone separates exactly-once from double execution.
    Atomicity is judged from the surviving ranks' memory afterwards.  A
    coordinator loss with backups=0 legitimately ends CoordinatorExhausted
    (reported separately, the transaction is deliberately not re-executed);
    everything else must commit with all keys applied."""
    combos = [(p, r) for p in range(4, max_p + 1)
              for r in range(1, max_r + 1) if p >= r + 3]
    if not combos:
        raise ValueError("bounds admit no world: need max_p >= 4, max_r >= 1")
    keys = [(i, 0) for i in range(min(max_keys, 3))]
    values = {k: f"v{i}".encode() for i, k in enumerate(keys)}
    ops = [("guard", keys[0], None)] + \
          [("put", k, values[k]) for k in keys]
    report = {"runs": 0, "worlds": [], "violations": [], "exhausted": 0,
              "aborted_dropped": 0, "log_disabled": log_disabled}

    def probe(p, r, backups, kills):
        outcome, state, dropped = _txn_probe(p, r, backups, ops, keys, seed,
                                             log_disabled, kills)
        report["runs"] += 1
        surviving = [k for k in keys if sc.kname(k) not in dropped]
        applied = [state.get(k) == values[k] for k in surviving]
        if outcome == T_EXHAUSTED:
            report["exhausted"] += 1
            return
        problems = []
        if any(applied) and not all(applied):
            problems.append("partial application")
        if outcome == T_COMMITTED and not all(applied):
            problems.append("committed but values missing")
        if outcome == T_ABORTED:
            if any(applied):
                # an abort must leave nothing behind; persisting writes are
                # the first execution of a transaction that then ran again
                problems.append("aborted but writes persist")
            elif sc.kname(keys[0]) in dropped:
                # the guard key died with its owner before anything ran;
                # refusing to commit against an unreadable guard is correct
                report["aborted_dropped"] += 1
            else:
                problems.append("aborted: the transaction executed twice")
        if problems:
            report["violations"].append(
                {"procs": p, "replicas": r, "backups": backups,
                 "victim": kills[0][0], "step": kills[0][1],
                 "outcome": outcome, "problems": problems})

    for p, r in combos:
        lo, hi = _txn_window(p, r, 2, ops, seed, log_disabled)
        for victim in range(p):
            for at in range(lo + 1, hi + 1):
                probe(p, r, 2, [(victim, at)])
        report["worlds"].append({"procs": p, "replicas": r, "backups": 2,
                                 "window": [lo + 1, hi]})
        log.info("check-2pc world P=%d R=%d B=2: window %d..%d, "
                 "%d victims", p, r, lo + 1, hi, p)

    # the defined degradation: no backups, coordinator dies mid-transaction
    p, r = combos[0]
    lo, hi = _txn_window(p, r, 0, ops, seed, log_disabled)
    for at in range(lo + 1, hi + 1):
        probe(p, r, 0, [(0, at)])
    report["worlds"].append({"procs": p, "replicas": r, "backups": 0,
                             "window": [lo + 1, hi]})
    return report


def _txn_world(p, r, backups, ops, seed, log_disabled, kills, trace=None):
    cfg = StoreConfig(replicas=r, backups=backups)
    submitter = p - 1
    last_kill = max((at for _, at in kills), default=0)
    result = {}

    def make_main(rank, store, mgr, txn):
        def main():
            store.init()
            if rank == submitter:
                res = txn.run(ops, mgr)
                result["outcome"] = res.outcome
            settle(store, mgr, last_kill)
            idle_member(store, mgr)
        return main

    sched = Scheduler(seed=seed)
    tr = tp.Transport(sched, p, trace=trace)
    for victim, at in kills:
        sched.schedule_kill(victim, at)
    stores = {}
    for rank in range(p):
        det = Detector(tr, rank, enabled=True)
        store = stores[rank] = Store(tr, rank, cfg, det)
        mgr = RecoveryManager(store)
        txn = TxnManager(store, log_disabled=log_disabled).attach(mgr)

        def make_helper(store=store):
            def helper():
                store.detector.helper_loop()
            return helper

        sched.spawn(f"p{rank}.helper", rank, "helper", make_helper())
        sched.spawn(f"p{rank}.main", rank, "main",
                    make_main(rank, store, mgr, txn))
    sched.run()
    return result.get("outcome"), stores, tr


def _txn_window(p, r, backups, ops, seed, log_disabled) -> tuple[int, int]:
    """Baseline traced run: the protocol window from submit to outcome."""
    events: list = []
    outcome, stores, tr = _txn_world(p, r, backups, ops, seed, log_disabled,
                                     kills=[], trace=events.append)
    assert outcome == T_COMMITTED, f"baseline P={p} R={r} did not commit"
    steps = {kind: [e["step"] for e in events
                    if e["op"] == "ctl_send" and e.get("kind") == kind]
             for kind in (tp.TXN_SUBMIT, tp.TXN_OUTCOME)}
    return steps[tp.TXN_SUBMIT][0], steps[tp.TXN_OUTCOME][0]


def _txn_probe(p, r, backups, ops, keys, seed, log_disabled, kills):
    outcome, stores, tr = _txn_world(p, r, backups, ops, seed, log_disabled,
                                     kills)
    survivor = min(rank for rank in stores if tr.alive(rank))
    store = stores[survivor]
    dropped = {sc.kname(k) for k in store.dropped}
    state = {key: store.debug_value(key) for key in keys
             if key in store.keys()}
    return outcome, state, dropped


# -- put-cost bench ------------------------------------------------------------

def model_put_cost(cm: tp.CostModel, replicas: int, size: int,
                   ping: bool, mode: str = MODE_NORMAL) -> float:
    """Closed-form cost of one replicated put under the sequential design:
    per copy one data message of header+payload (two in cas mode, whose
    layout splits header and payload), one flush, and one liveness ping."""
    copies = replicas + 1
    msgs = 2 if mode == MODE_CAS else 1
    counters = {"msgs": copies * msgs, "bytes": copies * (HEADER + size),
                "flushes": copies, "pings": copies if ping else 0}
    return cm.total(counters)


def bench_put(sizes, replica_counts, mode: str = MODE_NORMAL,
              ping: bool = True, ops: int = 16, seed: int = 0,
              cost_model: Optional[tp.CostModel] = None) -> list[dict]:
    """Measure the transport counters around `ops` puts per (size, replicas)
    cell and price them with the affine cost model; the measured per-put cost
    must coincide with the closed form when the accounting is right."""
    cm = cost_model or tp.CostModel()
    payload_off = CAS_PAYLOAD if mode == MODE_CAS else HEADER
    rows = []
    for r in replica_counts:
        procs = r + 2
        cfg = StoreConfig(replicas=r, mode=mode, ping=ping,
                          initial_capacity=max(64, payload_off + max(sizes)))
        cells = {}

        def driver(store, tr):
            for size in sizes:
                payload = b"x" * size
                before = dict(tr.counters)
                for _ in range(ops):
                    res = store.put((0, 0), payload)
                    assert res.ok, res.outcome
                after = dict(tr.counters)
                cells[size] = {k: after[k] - before[k]
                               for k in ("msgs", "bytes", "flushes", "pings")}

        sched = Scheduler(seed=seed)
        tr = tp.Transport(sched, procs, cost_model=cm)
        stores = {}
        for rank in range(procs):
            det = Detector(tr, rank, enabled=ping)
            stores[rank] = Store(tr, rank, cfg, det)
            if ping:
                def make_helper(store=stores[rank]):
                    def helper():
                        store.detector.helper_loop()
                    return helper
                sched.spawn(f"p{rank}.helper", rank, "helper", make_helper())

            def make_main(rank=rank, store=stores[rank]):
                def main():
                    store.init()
                    if rank == 0:       # holds no copy of key (0, 0)
                        driver(store, tr)
                return main
            sched.spawn(f"p{rank}.main", rank, "main", make_main())
        sched.run()

        for size in sizes:
            diff = cells[size]
            per_put = {}
            for name, total in diff.items():
                assert total % ops == 0, (name, total, ops)
                per_put[name] = total // ops
            measured = cm.total(per_put)
            model = model_put_cost(cm, r, size, ping, mode)
            rows.append({"mode": mode, "ping": ping, "replicas": r,
                         "size": size, "ops": ops, **per_put,
                         "measured": measured, "model": model})
            log.info("bench mode=%s ping=%s R=%d size=%d: measured=%s "
                     "model=%s", mode, ping, r, size, measured, model)
    return rows
