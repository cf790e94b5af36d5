"""Key-to-rank placement.

Every key belongs to an owner rank.  Its master copy lives on the owner's
successor and the R replicas are spread around the ring with a fixed stride,
so that consecutive ranks never hold two copies of the same key and a burst
of rank failures cannot take out all copies.  All functions are pure; every
rank computes identical placements from the same generation.

Ranks here are generation-relative (0..P-1 within the generation a placement
is computed for); callers translate to process identities.
"""

from __future__ import annotations


def copies_of(owner: int, procs: int, replicas: int) -> list[int]:
    """Ranks holding the R+1 copies of a key owned by `owner`; master first.

    master   = (owner + 1) mod P
    replica_i = (owner + 1 + (i+1) * stride) mod P,  stride = max(1, P // (R+1))

    Candidates colliding with the owner or an earlier copy skip forward by
    one.  Needs P >= R+2 so the owner plus R+1 distinct holders fit.
    """
    if procs < replicas + 2:
        raise ValueError(f"placement needs procs >= replicas+2, "
                         f"got procs={procs} replicas={replicas}")
    out = [(owner + 1) % procs]
    stride = max(1, procs // (replicas + 1))
    for i in range(replicas):
        cand = (owner + 1 + (i + 1) * stride) % procs
        while cand == owner or cand in out:
            cand = (cand + 1) % procs
        out.append(cand)
    return out


def holders(gen, owner: int, replicas: int) -> list[int]:
    """Copy holders as original ranks, for a key owned by original rank
    `owner`, placed within generation `gen` (an object with .live,
    .translation and .size).  The owner must be alive in that generation."""
    gen_owner = gen.translation[owner]
    return [gen.live[c] for c in copies_of(gen_owner, gen.size, replicas)]


def replacement_plan(old_gen, new_gen, owners: list[int], slots: int,
                     replicas: int) -> dict:
    """Where every copy of every surviving key lives after a rebuild.

    Returns {(owner, slot): {"holders": [...], "moved": [copy indices whose
    holder changed]}} with original ranks throughout.  Keys whose owner is
    not alive in new_gen are omitted (they are dropped, not rebuilt)."""
    plan = {}
    for owner in owners:
        if owner not in new_gen.translation:
            continue
        old = holders(old_gen, owner, replicas)
        new = holders(new_gen, owner, replicas)
        moved = [i for i in range(replicas + 1) if new[i] != old[i]]
        for slot in range(slots):
            plan[(owner, slot)] = {"holders": new, "moved": moved}
    return plan
