from collections import Counter

import pytest
from hypothesis import given, strategies as st

from rmastore.placement import copies_of, holders, replacement_plan
from rmastore.transport import WorldGeneration


def test_worked_example_p8_r2_owner3():
    # master = 4; stride = 8 // 3 = 2; replicas at +2 and +4 past the master
    assert copies_of(3, 8, 2) == [4, 6, 0]


def test_master_is_owner_successor():
    for p in range(4, 12):
        for owner in range(p):
            assert copies_of(owner, p, 1)[0] == (owner + 1) % p


def test_collision_skips_forward():
    # P=4, R=2: stride = 1; owner 0 -> master 1, then 2, then 3
    assert copies_of(0, 4, 2) == [1, 2, 3]
    # P=5, R=3: stride = 1; candidates walk past the owner
    assert copies_of(2, 5, 3) == [3, 4, 0, 1]


def test_distinctness_exhaustive():
    for p in range(4, 21):
        for r in range(1, 5):
            if p < r + 2:
                continue
            for owner in range(p):
                copies = copies_of(owner, p, r)
                assert len(copies) == r + 1
                assert len(set(copies)) == r + 1
                assert owner not in copies


def test_balance_every_rank_holds_equal_share():
    # placement is shift-invariant, so copies spread perfectly
    for p, r in [(4, 1), (8, 2), (41, 6), (10, 3)]:
        load = Counter()
        for owner in range(p):
            for c in copies_of(owner, p, r):
                load[c] += 1
        assert set(load.values()) == {r + 1}


def test_too_few_procs_raises():
    with pytest.raises(ValueError):
        copies_of(0, 3, 2)


@given(st.integers(4, 64), st.integers(1, 8))
def test_placement_properties(p, r):
    if p < r + 2:
        return
    for owner in range(p):
        copies = copies_of(owner, p, r)
        assert copies[0] == (owner + 1) % p
        assert len(set(copies)) == r + 1
        assert owner not in copies
        assert all(0 <= c < p for c in copies)


def test_holders_translates_to_original_ranks():
    gen = WorldGeneration(1, [0, 1, 3, 4], {0: 0, 1: 1, 3: 2, 4: 3})
    # owner 3 is generation rank 2 in a world of 4: copies_of(2, 4, 1) = [3, 1]
    assert copies_of(2, 4, 1) == [3, 1]
    assert holders(gen, 3, 1) == [4, 1]     # translated back to originals


def test_replacement_plan_hand_checked():
    gen0 = WorldGeneration(0, [0, 1, 2, 3], {r: r for r in range(4)})
    gen1 = WorldGeneration(1, [0, 1, 2], {0: 0, 1: 1, 2: 2})
    plan = replacement_plan(gen0, gen1, owners=[0, 1, 2, 3], slots=2, replicas=1)

    # owner 3 died: its keys are dropped, not planned
    assert (3, 0) not in plan and (3, 1) not in plan
    # owner 0: old [1, 3] -> new [1, 2]; only the replica moved
    assert plan[(0, 0)]["holders"] == [1, 2]
    assert plan[(0, 0)]["moved"] == [1]
    assert plan[(0, 1)] == plan[(0, 0)]
    # owner 1: old copies_of(1,4,1)=[2,0]; new copies_of(1,3,1)=[2,0] -> unmoved
    assert plan[(1, 0)]["holders"] == [2, 0]
    assert plan[(1, 0)]["moved"] == []
    # owner 2: old copies_of(2,4,1)=[3,1]; new copies_of(2,3,1)=[0,1]
    assert plan[(2, 0)]["holders"] == [0, 1]
    assert plan[(2, 0)]["moved"] == [0]


def test_replacement_plan_no_deaths_is_identity():
    gen0 = WorldGeneration(0, [0, 1, 2, 3, 4], {r: r for r in range(5)})
    gen1 = WorldGeneration(1, [0, 1, 2, 3, 4], {r: r for r in range(5)})
    plan = replacement_plan(gen0, gen1, owners=list(range(5)), slots=1, replicas=2)
    assert all(entry["moved"] == [] for entry in plan.values())


@given(st.integers(5, 24), st.integers(1, 3), st.integers(1, 3))
def test_replacement_plan_keeps_full_replication(p, r, deaths):
    if p - deaths < r + 2:
        return
    gen0 = WorldGeneration(0, list(range(p)), {x: x for x in range(p)})
    live = list(range(deaths, p))           # kill the lowest `deaths` ranks
    gen1 = WorldGeneration(1, live, {x: i for i, x in enumerate(live)})
    plan = replacement_plan(gen0, gen1, owners=list(range(p)), slots=1, replicas=r)
    for (owner, _slot), entry in plan.items():
        assert owner in live
        hs = entry["holders"]
        assert len(set(hs)) == r + 1
        assert all(h in live for h in hs)
        assert owner not in hs
