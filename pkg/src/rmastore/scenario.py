"""Scenario files: a versioned JSON description of a scripted run.

A scenario fixes the world (process count, store configuration, seed,
fidelity), a schedule of per-rank actions at given steps, and an optional
block of expectations checked after the run:

    {
      "version": 1,
      "seed": 7,
      "fidelity": "spec",
      "procs": 5,
      "config": {"replicas": 1, "mode": "normal"},
      "schedule": [
        {"step": 10, "rank": 2, "action": "put", "key": [0, 0], "size": 24},
        {"step": 40, "rank": 1, "action": "get", "key": [0, 0]},
        {"step": 60, "rank": 4, "action": "kill"},
        {"step": 90, "rank": 2, "action": "txn",
         "ops": [["guard", [0, 0], null], ["put", [0, 0], {"text": "x"}]]}
      ],
      "expect": {"consistent": true, "hangs": 0,
                 "values": {"0:0": {"text": "x"}}, "dropped": ["4:0"]}
    }

Steps are earliest issue times (a driver that is still busy issues late).
Value payloads are either literal ("text") or derived deterministically from
the scenario seed, the key, and the issuing step ("size"), so a scenario
never embeds binary data.
"""

from __future__ import annotations

import json
from typing import Optional

from .sim import derive_rng
from .store import StoreConfig

SCHEMA_VERSION = 1

ACTIONS = ("put", "get", "delete", "txn", "kill")
TXN_OPS = ("guard", "read", "put", "delete")

CONFIG_FIELDS = {"replicas", "slots", "initial_capacity", "mode", "ping",
                 "epoch", "backups"}
EXPECT_FIELDS = {"consistent", "values", "dropped", "hangs"}


class ScenarioError(Exception):
    """The scenario file does not parse or does not validate."""


def load_scenario(path: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path} is not valid JSON: {exc}") from exc
    return validate(doc)


def payload_bytes(seed: int, key, step: int, size: int) -> bytes:
    """The deterministic payload a sized put produces."""
    rng = derive_rng(seed, "payload", key[0], key[1], step)
    return rng.randbytes(size)


def kname(key) -> str:
    return f"{key[0]}:{key[1]}"


# -- validation ---------------------------------------------------------------

def _require(cond: bool, msg: str):
    if not cond:
        raise ScenarioError(msg)


def _check_key(key, procs: int, slots: int, where: str) -> tuple:
    _require(isinstance(key, (list, tuple)) and len(key) == 2
             and all(isinstance(x, int) for x in key),
             f"{where}: key must be [owner, slot]")
    owner, slot = key
    _require(0 <= owner < procs, f"{where}: owner {owner} out of range")
    _require(0 <= slot < slots, f"{where}: slot {slot} out of range")
    return (owner, slot)


def _check_value_spec(spec, where: str, expect_ctx: bool = False):
    """null, {"text": str}, or a derived payload {"size": int}.  Inside an
    action the producing step is the action's own; in expect blocks a sized
    spec must name it ({"size": N, "step": S}) and alternatives are allowed
    via {"any_of": [spec, ...]}."""
    if spec is None:
        return
    _require(isinstance(spec, dict), f"{where}: value must be an object or null")
    if expect_ctx and "any_of" in spec:
        _require(set(spec) == {"any_of"} and isinstance(spec["any_of"], list),
                 f"{where}: any_of takes a list of alternatives")
        for i, alt in enumerate(spec["any_of"]):
            _check_value_spec(alt, f"{where}.any_of[{i}]", expect_ctx=True)
        return
    keys = set(spec)
    if keys == {"text"}:
        _require(isinstance(spec["text"], str), f"{where}: text must be a string")
    elif keys == ({"size", "step"} if expect_ctx else {"size"}):
        _require(isinstance(spec["size"], int) and spec["size"] >= 0,
                 f"{where}: size must be a non-negative integer")
        if expect_ctx:
            _require(isinstance(spec["step"], int),
                     f"{where}: step must be an integer")
    else:
        raise ScenarioError(
            f"{where}: bad value spec fields {sorted(keys)}"
            + (" (a sized value in expect needs its producing step)"
               if "size" in keys else ""))


def validate(doc) -> dict:
    """Check a scenario document; returns it with defaults filled in."""
    _require(isinstance(doc, dict), "scenario must be a JSON object")
    _require(doc.get("version") == SCHEMA_VERSION,
             f"unsupported scenario version {doc.get('version')!r} "
             f"(this build reads version {SCHEMA_VERSION})")
    doc.setdefault("seed", 0)
    doc.setdefault("fidelity", "spec")
    doc.setdefault("schedule", [])
    _require(isinstance(doc["seed"], int), "seed must be an integer")
    _require(doc["fidelity"] in ("spec", "real-osc"),
             f"fidelity must be 'spec' or 'real-osc', not {doc['fidelity']!r}")
    procs = doc.get("procs")
    _require(isinstance(procs, int) and procs >= 2, "procs must be an integer >= 2")

    raw_cfg = doc.get("config", {})
    _require(isinstance(raw_cfg, dict), "config must be an object")
    unknown = set(raw_cfg) - CONFIG_FIELDS
    _require(not unknown, f"unknown config fields {sorted(unknown)}")
    try:
        cfg = StoreConfig(**raw_cfg)
        cfg.validate(procs)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"bad config: {exc}") from exc

    _require(isinstance(doc["schedule"], list), "schedule must be a list")
    last_step: dict = {}
    killed: dict = {}
    for i, act in enumerate(doc["schedule"]):
        where = f"schedule[{i}]"
        _require(isinstance(act, dict), f"{where}: must be an object")
        step, rank = act.get("step"), act.get("rank")
        _require(isinstance(step, int) and step >= 0,
                 f"{where}: step must be a non-negative integer")
        _require(isinstance(rank, int) and 0 <= rank < procs,
                 f"{where}: rank must be in [0, {procs})")
        name = act.get("action")
        _require(name in ACTIONS, f"{where}: action must be one of {ACTIONS}")
        _require(rank not in killed or name == "kill",
                 f"{where}: rank {rank} was killed at step {killed.get(rank)}")
        _require(last_step.get(rank) is None or step > last_step[rank],
                 f"{where}: steps must be strictly increasing per rank")
        last_step[rank] = step

        if name == "kill":
            _require(rank not in killed, f"{where}: rank {rank} killed twice")
            killed[rank] = step
            extra = set(act) - {"step", "rank", "action"}
            _require(not extra, f"{where}: kill takes no fields {sorted(extra)}")
        elif name in ("put", "get", "delete"):
            _check_key(act.get("key"), procs, cfg.slots, where)
            if name == "put":
                has = [f for f in ("text", "size") if f in act]
                _require(len(has) == 1, f"{where}: put needs exactly one of text/size")
                if "size" in act:
                    _require(isinstance(act["size"], int) and act["size"] >= 0,
                             f"{where}: size must be a non-negative integer")
                else:
                    _require(isinstance(act["text"], str),
                             f"{where}: text must be a string")
                if act.get("kill_after_ping"):
                    _require(cfg.ping, f"{where}: kill_after_ping needs ping enabled")
                    _require(cfg.mode == "normal",
                             f"{where}: kill_after_ping needs normal mode")
            else:
                _require("kill_after_ping" not in act,
                         f"{where}: kill_after_ping only applies to put")
        elif name == "txn":
            _require(cfg.mode == "normal", f"{where}: txn requires normal mode")
            ops = act.get("ops")
            _require(isinstance(ops, list) and ops,
                     f"{where}: txn needs a non-empty ops list")
            for j, op in enumerate(ops):
                opwhere = f"{where}.ops[{j}]"
                _require(isinstance(op, list) and len(op) >= 2
                         and op[0] in TXN_OPS, f"{opwhere}: bad transaction op")
                _check_key(op[1], procs, cfg.slots, opwhere)
                if op[0] in ("guard", "put"):
                    _require(len(op) == 3, f"{opwhere}: {op[0]} takes a value")
                    _check_value_spec(op[2], opwhere)
                else:
                    _require(len(op) == 2, f"{opwhere}: {op[0]} takes no value")

    _require(procs - len(killed) >= cfg.replicas + 2,
             f"{len(killed)} kills leave fewer than replicas+2 "
             f"= {cfg.replicas + 2} survivors")

    expect = doc.get("expect", {})
    _require(isinstance(expect, dict), "expect must be an object")
    unknown = set(expect) - EXPECT_FIELDS
    _require(not unknown, f"unknown expect fields {sorted(unknown)}")
    if "consistent" in expect:
        _require(isinstance(expect["consistent"], bool),
                 "expect.consistent must be a boolean")
    if "hangs" in expect:
        _require(isinstance(expect["hangs"], int) and expect["hangs"] >= 0,
                 "expect.hangs must be a non-negative integer")
    if "dropped" in expect:
        _require(isinstance(expect["dropped"], list),
                 "expect.dropped must be a list of 'owner:slot' names")
    for k, spec in expect.get("values", {}).items():
        _check_value_spec(spec, f"expect.values[{k}]", expect_ctx=True)
    doc["expect"] = expect
    return doc


def resolve_value(spec, seed: int, key, step: int) -> Optional[bytes]:
    """Concrete bytes for a value spec; None means the empty entry."""
    if spec is None:
        return None
    if "text" in spec:
        return spec["text"].encode()
    return payload_bytes(seed, key, spec.get("step", step), spec["size"])


# -- randomized workload generation -------------------------------------------

def generate_workload(seed: int, procs: int, replicas: int, n_keys: int,
                      n_ops: int, mode: str = "normal", kills: int = 0,
                      start: int = 20, gap: int = 4, max_size: int = 96) -> dict:
    """A randomized but fully deterministic scenario: every key gets a single
    writer rank, actions land at strictly increasing steps, and an optional
    number of distinct ranks die mid-run.  The schedule is independent of
    `mode`, so the same seed compares across modes."""
    rng = derive_rng(seed, "workload")
    n_keys = min(n_keys, procs)
    keys = [(o, 0) for o in range(n_keys)]
    writer = {k: rng.randrange(procs) for k in keys}
    schedule = []
    step = start
    for _ in range(n_ops):
        key = keys[rng.randrange(len(keys))]
        roll = rng.random()
        act = {"step": step, "rank": writer[key], "key": list(key)}
        if roll < 0.6:
            act.update(action="put", size=rng.randrange(max_size + 1))
        elif roll < 0.85:
            act.update(action="get", rank=rng.randrange(procs))
        else:
            act.update(action="delete")
        schedule.append(act)
        step += gap
    if kills:
        # kill steps sit off the action-step grid so no rank ever has two
        # schedule entries at the same step
        victims = rng.sample(range(procs), kills)
        killed_at = {}
        for v in victims:
            at = rng.randrange(start, step)
            if at % gap == start % gap:
                at += 1
            killed_at[v] = at
        schedule = [a for a in schedule
                    if a["rank"] not in killed_at
                    or a["step"] < killed_at[a["rank"]]]
        schedule.extend({"step": at, "rank": v, "action": "kill"}
                        for v, at in killed_at.items())
    schedule.sort(key=lambda a: (a["step"], a["rank"]))
    doc = {
        "version": SCHEMA_VERSION,
        "seed": seed,
        "fidelity": "spec",
        "procs": procs,
        "config": {"replicas": replicas, "mode": mode},
        "schedule": schedule,
    }
    return validate(doc)
