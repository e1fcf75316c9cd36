import copy
import random

import pytest

from hierchain.hierarchy import ChainPath
from hierchain.ledger import (
    ASSET_ABSENT,
    ASSET_IN_FLIGHT,
    WRONG_OWNER,
    InvalidBlock,
    PartitionState,
    SameOriginDestination,
    Transaction,
    replay_canonical,
    settlement_condition_for,
    validate_transaction,
)
from hierchain.node import Node

from helpers import CONFIG3, SCHEDULE3, ConsistentForestBuilder, mk_block
from oracles import naive_final_state

R = ChainPath((1,))
C11 = ChainPath((1, 1))
C12 = ChainPath((1, 2))
C111 = ChainPath((1, 1, 1))
C112 = ChainPath((1, 1, 2))
C122 = ChainPath((1, 2, 2))


def tx(tx_id, origin, dest, asset, sender, new_owner="new-" + "owner"):
    return Transaction(tx_id, origin, dest, asset, sender, new_owner)


# --------------------------------------------------------------- validation


def test_validate_happy_path():
    part = PartitionState(C111, {"a1": "alice"})
    assert validate_transaction(tx("t", C111, C111, "a1", "alice"), part, "alice") is None


def test_validate_absent_and_wrong_owner():
    part = PartitionState(C111, {"a1": "alice"})
    assert validate_transaction(tx("t", C111, C111, "zz", "alice"), part, "alice") == ASSET_ABSENT
    assert validate_transaction(tx("t", C111, C111, "a1", "bob"), part, "bob") == WRONG_OWNER


def test_validate_in_flight():
    part = PartitionState(C111, {})
    reason = validate_transaction(tx("t", C111, C111, "a1", "alice"), part, "alice", in_flight={"a1": "t0"})
    assert reason == ASSET_IN_FLIGHT


# ----------------------------------------------------- settlement conditions


def test_condition_cross_branch_needs_two_links():
    cond = settlement_condition_for(tx("t", C111, C122, "a", "s"))
    assert cond.ancestor == R
    assert cond.first_link == (C111, R)
    assert cond.second_link == (C122, R)


def test_condition_destination_is_ancestor():
    cond = settlement_condition_for(tx("t", C111, R, "a", "s"))
    assert cond.ancestor == R
    assert cond.second_link is None


def test_condition_origin_is_ancestor():
    cond = settlement_condition_for(tx("t", C11, C112, "a", "s"))
    assert cond.ancestor == C11
    assert cond.first_link == (C11, C11)
    assert cond.second_link == (C112, C11)


def test_condition_rejects_same_chain():
    with pytest.raises(SameOriginDestination):
        settlement_condition_for(tx("t", C111, C111, "a", "s"))


# ------------------------------------------------------------ apply machinery


class Recorder:
    def __init__(self):
        self.events = []

    def on_commit(self, tx_id, t):
        self.events.append(("commit", tx_id))

    def on_uncommit(self, tx_id, t):
        self.events.append(("uncommit", tx_id))

    def on_settle(self, tx_id, t):
        self.events.append(("settle", tx_id))

    def on_unsettle(self, tx_id, t):
        self.events.append(("unsettle", tx_id))


class Harness:
    def __init__(self, genesis_owners=None, tracked=None):
        self.registry = {}
        self.archive = {}
        self.owners = genesis_owners or {
            C111: {"a1": "alice", "a2": "anna"},
            C112: {"b1": "ben"},
            C122: {"z1": "zoe"},
            C11: {"m1": "mia"},
            C12: {"p1": "pia"},
            R: {"r1": "rex"},
        }
        self.node = Node(CONFIG3, SCHEDULE3, self.owners, self.registry, self.archive, tracked=tracked)
        self.recorder = Recorder()
        self.node.ledger.recorder = self.recorder

    def add_tx(self, t):
        self.registry[t.tx_id] = t
        return t

    def feed(self, bid, leaf, achieved, preds, bodies=None, time=0.0):
        block = mk_block(CONFIG3, bid, leaf, achieved, preds, bodies=bodies, time=time)
        self.archive[block.id] = block
        self.node.receive(block)
        return block

    def owned(self, chain):
        return self.node.partition(chain).owned

    def fingerprint(self):
        ledger = self.node.ledger
        return (
            {c: (dict(p.owned), dict(p.pending)) for c, p in sorted(ledger.partitions.items())},
            dict(ledger.in_flight),
            {c: frozenset(s) for c, s in sorted(ledger.committed.items())},
            dict(ledger.settled),
            dict(ledger.watermarks),
        )


def test_same_chain_transfer_applies_immediately():
    h = Harness()
    h.add_tx(tx("t1", C111, C111, "a1", "alice", "bob"))
    h.feed("L1", (1, 1, 1), 3, {3: "genesis"}, bodies={3: ("t1",)})
    assert h.owned(C111)["a1"] == "bob"


def test_cross_branch_transfer_full_lifecycle():
    h = Harness()
    h.add_tx(tx("t1", C111, C122, "a1", "alice", "bob"))
    # Commit at the origin leaf: debit, asset in neither partition.
    h.feed("L1", (1, 1, 1), 3, {3: "genesis"}, bodies={3: ("t1",)})
    assert "a1" not in h.owned(C111)
    assert "a1" not in h.owned(C122)
    assert h.node.ledger.in_flight == {"a1": "t1"}

    # First link: a block shared with the root pins the origin history.
    h.feed("K1", (1, 1, 1), 1, {1: "genesis", 2: "genesis", 3: "L1"})
    entry = h.node.partition(C122).pending["t1"]
    assert entry.link_block == "K1"
    assert entry.commit_block == "L1"
    assert entry.needs_second_link
    assert "a1" not in h.owned(C122)

    # Second link: a later root-shared block on the destination branch.
    h.feed("K2", (1, 2, 2), 1, {1: "K1", 2: "genesis", 3: "genesis"})
    assert h.owned(C122)["a1"] == "bob"
    assert "t1" not in h.node.partition(C122).pending
    assert h.node.ledger.in_flight == {}
    assert h.node.ledger.settled["t1"] == C122


def test_destination_is_ancestor_settles_at_first_link():
    h = Harness()
    h.add_tx(tx("t1", C111, R, "a1", "alice", "carol"))
    h.feed("L1", (1, 1, 1), 3, {3: "genesis"}, bodies={3: ("t1",)})
    assert "a1" not in h.owned(R)
    h.feed("K1", (1, 1, 1), 1, {1: "genesis", 2: "genesis", 3: "L1"})
    assert h.owned(R)["a1"] == "carol"
    assert ("settle", "t1") in h.recorder.events


def test_origin_is_ancestor_waits_for_strictly_later_link():
    h = Harness()
    h.add_tx(tx("t1", C11, C112, "m1", "mia", "ned"))
    h.feed("M", (1, 1, 1), 2, {2: "genesis", 3: "genesis"}, bodies={2: ("t1",)})
    assert "m1" not in h.owned(C11)
    assert h.node.partition(C112).pending["t1"].link_block == "M"
    # A shared block on the destination slice strictly after M settles it.
    h.feed("N", (1, 1, 2), 2, {2: "M", 3: "genesis"})
    assert h.owned(C112)["m1"] == "ned"


def test_settlements_on_one_block_apply_deepest_origin_first():
    h = Harness()
    h.add_tx(tx("t3", C111, R, "a1", "alice", "x3"))  # origin order 3
    h.add_tx(tx("t2", C12, R, "p1", "pia", "x2"))  # origin order 2
    h.feed("L1", (1, 1, 1), 3, {3: "genesis"}, bodies={3: ("t3",)})
    h.feed("M1", (1, 2, 2), 2, {2: "genesis", 3: "genesis"}, bodies={2: ("t2",)})
    # One root-shared block pinning both origins cannot exist (slices differ),
    # so pin the order-3 origin first, then a block on the other branch.
    h.feed("K1", (1, 1, 1), 1, {1: "genesis", 2: "genesis", 3: "L1"})
    settles = [e for e in h.recorder.events if e[0] == "settle"]
    assert settles == [("settle", "t3")]
    h.feed("K2", (1, 2, 2), 1, {1: "K1", 2: "M1", 3: "M1"})
    settles = [e for e in h.recorder.events if e[0] == "settle"]
    assert settles == [("settle", "t3"), ("settle", "t2")]
    assert h.owned(R)["a1"] == "x3" and h.owned(R)["p1"] == "x2"


def test_double_spend_in_one_body_invalidates_block():
    h = Harness()
    h.add_tx(tx("t1", C111, C122, "a1", "alice", "bob"))
    h.add_tx(tx("t2", C111, C112, "a1", "alice", "eve"))
    before = h.fingerprint()
    h.feed("L1", (1, 1, 1), 3, {3: "genesis"}, bodies={3: ("t1", "t2")})
    # The block is discarded wholesale and state is untouched.
    assert "L1" in h.node.forest.invalid
    assert h.fingerprint() == before
    assert h.node.canonical(C111) == ["genesis"]


def test_revert_restores_unsettled_origin_commit():
    h = Harness()
    h.add_tx(tx("t1", C111, C122, "a1", "alice", "bob"))
    before = h.fingerprint()
    h.feed("L1", (1, 1, 1), 3, {3: "genesis"}, bodies={3: ("t1",)}, time=1.0)
    assert h.node.ledger.in_flight == {"a1": "t1"}
    # Heavier competing leaf fork reorgs the commit away.
    h.feed("X1", (1, 1, 1), 3, {3: "genesis"}, time=2.0)
    h.feed("X2", (1, 1, 1), 3, {3: "X1"}, time=3.0)
    assert h.node.canonical(C111) == ["genesis", "X1", "X2"]
    assert h.fingerprint() == before
    assert h.owned(C111)["a1"] == "alice"


def test_reorg_unsettles_credits_in_reverse_order():
    h = Harness()
    h.add_tx(tx("t1", C111, C122, "a1", "alice", "bob"))
    h.feed("L1", (1, 1, 1), 3, {3: "genesis"}, bodies={3: ("t1",)})
    h.feed("K1", (1, 1, 1), 1, {1: "genesis", 2: "genesis", 3: "L1"})
    snapshot = h.fingerprint()
    h.feed("K2", (1, 2, 2), 1, {1: "K1", 2: "genesis", 3: "genesis"})
    assert h.owned(C122)["a1"] == "bob"

    # Root fork heavier than K1+K2 excludes the settlement block: the credit
    # must unwind and the pending entry reappear. The fork miner's own view
    # has K1 canonical, so its blocks reference K1 where they share a chain.
    h.feed("F1", (1, 1, 2), 1, {1: "K1", 2: "K1", 3: "genesis"}, time=5.0)
    h.feed("F2", (1, 1, 2), 1, {1: "F1", 2: "F1", 3: "F1"}, time=6.0)
    assert h.node.canonical(R) == ["genesis", "K1", "F1", "F2"]
    assert "a1" not in h.owned(C122)
    assert h.node.partition(C122).pending["t1"].link_block == "K1"
    assert h.node.ledger.in_flight == {"a1": "t1"}
    events = [e for e in h.recorder.events if e[0] in ("settle", "unsettle")]
    assert events == [("settle", "t1"), ("unsettle", "t1")]
    fp = h.fingerprint()
    for (chain, (owned, pending)) in fp[0].items():
        assert owned == snapshot[0][chain][0]
        assert pending == snapshot[0][chain][1]


def test_replay_matches_incremental_on_random_traces():
    for seed in range(6):
        rng = random.Random(seed)
        builder = ConsistentForestBuilder(CONFIG3, SCHEDULE3, rng)
        owners = {}
        pools = {}
        for chain in CONFIG3.all_chains():
            owners[chain] = {f"{chain}:a{k}": f"{chain}:u{k}" for k in range(12)}
            pools[chain] = sorted(owners[chain])
        h = Harness(genesis_owners=owners)
        chains = CONFIG3.all_chains()
        for i in range(70):
            block = builder.next_block()
            bodies = {}
            # Attach up to two fresh-asset transactions per block body.
            for order in range(block.achieved_order, 4):
                chain = block.chain_at(order)
                ids = []
                for _ in range(rng.randrange(0, 2)):
                    if not pools[chain]:
                        continue
                    asset = pools[chain].pop(rng.randrange(len(pools[chain])))
                    dest = rng.choice(chains)
                    t = Transaction(f"tx-{asset}", chain, dest, asset, owners[chain][asset], f"nw-{asset}")
                    h.registry[t.tx_id] = t
                    ids.append(t.tx_id)
                if ids:
                    bodies[order] = tuple(ids)
            block = mk_block(
                CONFIG3, block.id, block.slice[-1], block.achieved_order,
                block.predecessors, bodies=bodies, time=block.found_time,
            )
            builder.blocks[block.id] = block
            h.archive[block.id] = block
            h.node.receive(block)

        # Replay along the final canonical view must reproduce the state.
        replayed = replay_canonical(
            CONFIG3, CONFIG3.all_chains(), owners, h.registry, h.archive,
            h.node.view.canonical,
        )
        live = h.node.ledger
        for chain in CONFIG3.all_chains():
            assert replayed.partitions[chain].owned == live.partitions[chain].owned, (seed, chain)
            assert replayed.partitions[chain].pending == live.partitions[chain].pending, (seed, chain)
        assert replayed.in_flight == live.in_flight
        assert replayed.settled == live.settled
        assert replayed.committed == live.committed
        assert replayed.watermarks == live.watermarks

        # Independent settlement logic agrees on final ownership.
        canonical = {c: list(ids) for c, ids in h.node.view.canonical.items()}
        oracle_owned, oracle_settled = naive_final_state(
            CONFIG3, canonical, h.registry, h.archive, owners,
        )
        for chain in CONFIG3.all_chains():
            assert oracle_owned[chain] == live.partitions[chain].owned, (seed, chain)
        assert oracle_settled == live.settled

        # Conservation: every asset lives in exactly one place.
        seeded = [a for chain in owners for a in owners[chain]]
        assert live.conservation_violations(seeded) == []


def test_delivery_order_invariance_of_state():
    rng = random.Random(33)
    builder = ConsistentForestBuilder(CONFIG3, SCHEDULE3, rng)
    owners = {C111: {"a1": "alice"}, C122: {"z1": "zoe"}}
    registry = {}
    t1 = Transaction("t1", C111, C122, "a1", "alice", "bob")
    registry["t1"] = t1
    blocks = []
    archive = {}

    def make(bid, leaf, achieved, preds, bodies=None, time=0.0):
        b = mk_block(CONFIG3, bid, leaf, achieved, preds, bodies=bodies, time=time)
        blocks.append(b)
        archive[b.id] = b

    make("L1", (1, 1, 1), 3, {3: "genesis"}, bodies={3: ("t1",)})
    make("K1", (1, 1, 1), 1, {1: "genesis", 2: "genesis", 3: "L1"})
    make("K2", (1, 2, 2), 1, {1: "K1", 2: "genesis", 3: "genesis"})
    make("L2", (1, 1, 1), 3, {3: "K1"})

    states = []
    for order in ([0, 1, 2, 3], [3, 2, 1, 0], [1, 0, 3, 2]):
        node = Node(CONFIG3, SCHEDULE3, owners, registry, archive)
        for i in order:
            node.receive(blocks[i])
        states.append(
            (
                {c: tuple(ids) for c, ids in node.view.canonical.items()},
                {c: dict(p.owned) for c, p in node.ledger.partitions.items()},
                dict(node.ledger.settled),
            )
        )
    assert states[0] == states[1] == states[2]
