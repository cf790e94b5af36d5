"""Acceptance suite: one test per headline guarantee of the store.

Every expected value here is exact.  Oracle comparisons go through full
sha256 digests of independently recomputed payloads, cost figures come from
the closed-form model evaluated over integer counters, and the structural
guarantees (no violations, no hangs, no data loss) are asserted as literal
zeros.  Each test also enforces a wall-clock budget so the guarantees stay
cheap enough to check routinely.
"""

import hashlib
import time
from pathlib import Path

import pytest

from rmastore import cas
from rmastore import harness
from rmastore import scenario as sc
from rmastore import transport as tp
from rmastore.recovery import RecoveryManager
from rmastore.store import MODE_CAS, S_OK, StoreConfig

from conftest import idle_member, run_stores

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def _digest_of(value):
    """(header, sha256) an audit record must show for a final value."""
    payload = value or b""
    return len(payload), hashlib.sha256(payload).hexdigest()


def _parse_audit(report):
    """Split report["audit"] lines into (records by key, dropped, data_loss)."""
    import json

    records = {}
    dropped = data_loss = None
    for line in report["audit"]:
        rec = json.loads(line)
        if "key" in rec:
            owner, slot = map(int, rec["key"].split(":"))
            records[(owner, slot)] = rec
        elif "dropped" in rec:
            dropped = rec["dropped"]
        else:
            data_loss = rec["data_loss"]
    return records, dropped, data_loss


def _mutation_value(doc, act):
    if act["action"] == "delete":
        return None
    if "text" in act:
        return act["text"].encode() or None
    value = sc.payload_bytes(doc["seed"], tuple(act["key"]), act["step"],
                             act["size"])
    return value or None


def _admissible(doc, oplog, key):
    """Digest set a surviving key may legally hold after failures: the last
    acknowledged mutation, plus every later attempt that never completed (a
    write in flight at a death may have reached a copy and then been spread
    to all of them by the repair)."""
    by_step = {e["step"]: e for e in oplog}
    trail = []
    for act in doc["schedule"]:
        if act["action"] in ("put", "delete") and tuple(act["key"]) == key:
            entry = by_step.get(act["step"])
            acked = entry is not None and entry["outcome"] == S_OK
            trail.append((acked, _mutation_value(doc, act)))
    last_ok = max((i for i, (acked, _) in enumerate(trail) if acked),
                  default=None)
    base = None if last_ok is None else trail[last_ok][1]
    allowed = {_digest_of(base)}
    for acked, value in trail[0 if last_ok is None else last_ok + 1:]:
        if not acked:
            allowed.add(_digest_of(value))
    return allowed


# -- 1. replication completeness ------------------------------------------------

WORLD_SHAPES = [(4, 1), (4, 2), (8, 1), (8, 2), (8, 6),
                (41, 1), (41, 2), (41, 6)]


def test_replication_completeness_matches_sequential_oracle():
    """Failure-free runs across every world shape leave each key with R+1
    byte-identical copies equal to the sequential oracle."""
    t0 = time.monotonic()
    total_ops = 0
    for procs, replicas in WORLD_SHAPES:
        doc = sc.generate_workload(seed=1000 + 10 * procs + replicas,
                                   procs=procs, replicas=replicas,
                                   n_keys=procs, n_ops=1300)
        total_ops += len(doc["schedule"])
        oracle = harness.sequential_oracle(doc)
        code, report = harness.run_scenario(doc)
        assert code == 0, (procs, replicas, report["checks"])
        records, dropped, data_loss = _parse_audit(report)
        assert dropped == [] and data_loss == []
        for key, rec in records.items():
            assert rec["consistent"], (procs, replicas, key)
            assert len(rec["holders"]) == replicas + 1
            want_header, want_digest = _digest_of(oracle.get(key))
            assert (rec["header"], rec["digest"]) == (want_header,
                                                      want_digest), key
    assert total_ops >= 10_000
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    print(f"replication completeness: {total_ops} ops over "
          f"{len(WORLD_SHAPES)} world shapes in {elapsed:.2f}s")


# -- 2. recovery safety ----------------------------------------------------------

def test_recovery_restores_admissible_values_without_data_loss():
    """Randomized schedules with up to R deaths: every surviving key ends
    fully replicated with an admissible value and the audit reports no data
    loss; only keys owned by the dead are dropped."""
    t0 = time.monotonic()
    shapes = [(5, 1), (6, 1), (6, 2), (8, 2)]
    runs = kills_total = in_flight = 0
    for i in range(200):
        procs, replicas = shapes[i % len(shapes)]
        kills = 1 + (i // len(shapes)) % replicas
        doc = sc.generate_workload(seed=3000 + i, procs=procs,
                                   replicas=replicas, n_keys=procs,
                                   n_ops=24, kills=kills)
        victims = {a["rank"] for a in doc["schedule"]
                   if a["action"] == "kill"}
        assert len(victims) == kills and kills <= replicas
        code, report = harness.run_scenario(doc)
        assert code == 0, (i, report["checks"])
        records, dropped, data_loss = _parse_audit(report)
        assert data_loss == []
        for kn in dropped:
            assert int(kn.split(":")[0]) in victims, (i, kn)
        for key, rec in records.items():
            assert rec["consistent"], (i, key)
            assert len(rec["holders"]) == replicas + 1
            allowed = _admissible(doc, report["ops"], key)
            in_flight += len(allowed) > 1
            assert (rec["header"], rec["digest"]) in allowed, (i, key)
        runs += 1
        kills_total += kills
    elapsed = time.monotonic() - t0
    assert elapsed < 120.0
    print(f"recovery safety: {runs} schedules, {kills_total} kills, "
          f"{in_flight} keys with an in-flight candidate, {elapsed:.2f}s")


# -- 3. transaction atomicity ----------------------------------------------------

def test_transactions_are_atomic_under_exhaustive_single_kills():
    """Every single-kill injection point in bounds yields zero atomicity or
    exactly-once violations; disabling backup logging (negative control)
    yields at least one."""
    t0 = time.monotonic()
    clean = harness.check_2pc()
    assert clean["runs"] >= 500
    assert clean["violations"] == []
    assert clean["exhausted"] > 0          # the defined backups=0 degradation
    mutated = harness.check_2pc(max_p=4, max_r=1, log_disabled=True)
    assert len(mutated["violations"]) >= 1
    elapsed = time.monotonic() - t0
    assert elapsed < 120.0
    print(f"transaction atomicity: {clean['runs']} clean runs, "
          f"{clean['exhausted']} exhausted, "
          f"{len(mutated['violations'])} violations once logging is off, "
          f"{elapsed:.2f}s")


# -- 4. lock escape ---------------------------------------------------------------

def test_blocked_contender_escapes_a_dead_lock_holder():
    """A rank dies holding a window epoch while a contender is queued behind
    it: the revocation releases the contender, the world shrinks and
    rebuilds, and the retried acquisition succeeds.  In entry-lock mode the
    same pathology resolves by bounded takeover instead."""
    t0 = time.monotonic()
    key = (0, 0)

    events = []
    out = {}

    def program(rank, store, sched):
        mgr = RecoveryManager(store)
        tr = store.tr
        base = sched.step                  # init cost varies; time from here
        if rank == 3:                      # holder: die without unlocking
            win = store.window(key, 0)
            assert tr.win_lock(win, store.holders(key)[0], tp.EXCLUSIVE).ok
            sched.park_forever()
        elif rank == 2:                    # contender
            sched.wait_until_step(base + 200)
            first = tr.win_lock(store.window(key, 0), store.holders(key)[0],
                                tp.EXCLUSIVE)
            out["first"] = first.outcome
            out["released_at"] = sched.step
            mgr.join()
            second = tr.win_lock(store.window(key, 0), store.holders(key)[0],
                                 tp.EXCLUSIVE)
            out["second"] = second.outcome
            tr.win_unlock(store.window(key, 0), store.holders(key)[0])
        elif rank == 4:                    # watcher: kills, then notices
            sched.wait_until_step(base + 400)
            out["killed_at"] = sched.step
            sched.kill_now(3)
            assert store.detector.guard(3) is not None
            mgr.handle_failure(3)
            out["rounds"] = mgr.report["rounds"]
        idle_member(store, mgr)

    run_stores(5, StoreConfig(replicas=1), program, trace=events.append)

    assert out["first"] == tp.REVOKED
    assert out["released_at"] > out["killed_at"]   # blocked across the death
    assert out["second"] == tp.OK
    assert out["rounds"] == 1
    revoke_at = min(e["step"] for e in events if e["op"] == "win_revoke")
    shrink_at = min(e["step"] for e in events if e["op"] == "comm_shrink")
    assert revoke_at < shrink_at
    assert any(e["op"] == "win_lock" and e["rank"] == 2
               and e["outcome"] == tp.OK and e["step"] > shrink_at
               for e in events)

    cas_events = []
    cas_out = {}

    def cas_program(rank, store, sched):
        base = sched.step
        if rank == 3:                      # holder: die owning the entry lock
            assert cas.lock_entry(store, key).ok
            sched.park_forever()
        elif rank == 2:                    # contender arrives after the death
            sched.wait_until_step(base + 200)
            sched.kill_now(3)
            res = cas.lock_entry(store, key)
            cas_out["outcome"] = res.outcome
            cas.unlock_entry(store, key)

    run_stores(5, StoreConfig(replicas=1, mode=MODE_CAS), cas_program,
               trace=cas_events.append)

    assert cas_out["outcome"] == S_OK
    takeovers = [e for e in cas_events if e["op"] == "lock_takeover"]
    assert [(e["rank"], e["dead_holder"]) for e in takeovers] == [(2, 3)]
    assert not any(e["op"] == "lock_entry" and e["outcome"] == "Busy"
                   for e in cas_events)    # resolved within the retry bound
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    print(f"lock escape: revoke@{revoke_at} shrink@{shrink_at}, "
          f"entry-lock takeover by rank 2, {elapsed:.2f}s")


# -- 5. hang avoidance and the residual race --------------------------------------

def _spaced_death_doc(victim: int, seed: int) -> dict:
    """One death per run, landing in a wide gap between operations, so every
    liveness probe observes it: the documented safe pattern."""
    procs = 6
    others = [r for r in range(procs) if r != victim]
    key_a = [(victim + 1) % procs, 0]      # owner stays alive
    key_b = [victim, 0]                    # dies with its owner
    key_c = [(victim + 2) % procs, 0]
    key_d = [(victim + 5) % procs, 0]      # master copy lives on the victim
    schedule = [
        {"step": 20, "rank": others[0], "action": "put",
         "key": key_a, "text": "alpha"},
        {"step": 40, "rank": others[1], "action": "put",
         "key": key_b, "size": 64},
        {"step": 60, "rank": others[2], "action": "put",
         "key": key_d, "text": "delta"},
        {"step": 600, "rank": victim, "action": "kill"},
        {"step": 1200, "rank": others[3], "action": "get", "key": key_d},
        {"step": 1800, "rank": others[0], "action": "put",
         "key": key_c, "text": "omega"},
        {"step": 2400, "rank": others[1], "action": "get", "key": key_a},
    ]
    kname = sc.kname
    return {
        "version": 1,
        "seed": seed,
        "fidelity": "real-osc",
        "procs": procs,
        "config": {"replicas": 2},
        "schedule": schedule,
        "expect": {
            "consistent": True,
            "hangs": 0,
            "dropped": [kname(tuple(key_b))],
            "values": {kname(tuple(key_a)): {"text": "alpha"},
                       kname(tuple(key_c)): {"text": "omega"},
                       kname(tuple(key_d)): {"text": "delta"}},
        },
    }


def test_pings_prevent_hangs_except_for_the_documented_race():
    """Deaths that precede the next liveness probe never hang an access,
    for every choice of victim; the probe-then-die interleaving is the one
    residual hang and is flagged as such."""
    t0 = time.monotonic()
    for victim in range(6):
        code, report = harness.run_scenario(_spaced_death_doc(victim,
                                                              seed=50 + victim))
        assert code == 0, (victim, report["checks"])
        assert report["hangs"] == 0
    code, report = harness.run_scenario(str(SCENARIOS / "ping_race.json"))
    assert code == 0, report["checks"]
    assert report["hangs"] == 1
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    print(f"hang avoidance: 6 victims x 0 hangs, race scenario pins "
          f"exactly 1, {elapsed:.2f}s")


# -- 6. cross-mode equivalence -----------------------------------------------------

def test_normal_and_entry_lock_modes_produce_identical_audits():
    """The same failure-free schedule leaves byte-identical audits whether
    operations run bare or under entry locks."""
    t0 = time.monotonic()
    for i in range(100):
        reports = {}
        for mode in ("normal", "cas"):
            doc = sc.generate_workload(seed=7000 + i, procs=6, replicas=2,
                                       n_keys=6, n_ops=18, mode=mode)
            code, report = harness.run_scenario(doc)
            assert code == 0, (i, mode, report["checks"])
            reports[mode] = report
        assert reports["normal"]["audit"] == reports["cas"]["audit"], i
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    print(f"cross-mode equivalence: 100 schedules byte-identical, "
          f"{elapsed:.2f}s")


# -- 7. the cost model prices every put exactly ------------------------------------

def test_measured_put_cost_equals_the_affine_model():
    """Measured transport counters price each put at exactly the closed-form
    figure; the headline cell (R=6, 1 KiB, pings on) costs 93.24 and turning
    pings off removes exactly (R+1) * delta."""
    t0 = time.monotonic()
    cm = tp.CostModel()
    cells = {}
    for mode in ("normal", "cas"):
        for ping in (True, False):
            rows = harness.bench_put([64, 1024], [1, 2, 6],
                                     mode=mode, ping=ping)
            for row in rows:
                assert row["measured"] == row["model"], row
                expect = harness.model_put_cost(cm, row["replicas"],
                                                row["size"], ping, mode)
                assert row["measured"] == expect, row
                cells[(mode, ping, row["replicas"], row["size"])] = \
                    row["measured"]
    assert cells[("normal", True, 6, 1024)] == 93.24
    for mode in ("normal", "cas"):
        for r in (1, 2, 6):
            for size in (64, 1024):
                gap = cells[(mode, True, r, size)] - \
                    cells[(mode, False, r, size)]
                assert gap == (r + 1) * cm.delta
    elapsed = time.monotonic() - t0
    assert elapsed < 5.0
    print(f"cost model: 24 cells exact, headline 93.24, ping delta "
          f"(R+1)*{cm.delta}, {elapsed:.2f}s")


# -- 8. determinism -----------------------------------------------------------------

def test_same_scenario_and_seed_replay_byte_identical_traces(tmp_path):
    """Two runs of the same scenario and seed emit byte-identical traces,
    including runs with deaths and recovery."""
    t0 = time.monotonic()
    cases = [
        ("race", str(SCENARIOS / "ping_race.json")),
        ("kills", sc.generate_workload(seed=77, procs=8, replicas=2,
                                       n_keys=8, n_ops=30, kills=2)),
    ]
    for name, doc in cases:
        first = tmp_path / f"{name}_first.log"
        second = tmp_path / f"{name}_second.log"
        code1, _ = harness.run_scenario(doc, trace_path=str(first))
        code2, _ = harness.run_scenario(doc, trace_path=str(second))
        assert code1 == code2 == 0
        assert first.stat().st_size > 0
        assert first.read_bytes() == second.read_bytes(), name
    elapsed = time.monotonic() - t0
    assert elapsed < 5.0
    print(f"determinism: {len(cases)} scenarios replay byte-identical, "
          f"{elapsed:.2f}s")
