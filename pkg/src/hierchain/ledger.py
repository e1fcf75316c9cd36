"""Partitioned asset-ownership state driven by canonical-chain updates.

Each chain owns one partition of the application state: a map from asset id
to owner account. A transaction names an origin chain (whose partition it
debits) and a destination chain (credited later). Same-chain transfers
apply like an ordinary blockchain update. Cross-chain transfers debit the
origin as soon as the committing block is canonical there; the destination
credit waits for the settlement condition: a block shared by the origin
chain and the deepest common ancestor of origin and destination, followed
(when the destination sits below that ancestor) by a later block shared by
the destination chain and the ancestor.

Everything a replica credits is derived from the canonical chains of the
ancestor ("relay") chains it tracks plus the structural predecessor links of
shared blocks, never from another replica's opinion, which is what makes
replicas that agree on a canonical chain agree on the partition state.

Every state mutation is recorded as an invertible delta so reorgs revert
exactly; deltas are replayed in last-in-first-out order across chains.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .blocks import Block
from .forkchoice import ReorgPlan
from .hierarchy import ChainPath, HierarchyConfig, common_ancestor

ASSET_ABSENT = "asset-absent"
WRONG_OWNER = "wrong-owner"
ASSET_IN_FLIGHT = "asset-in-flight"


class LedgerError(Exception):
    pass


class SameOriginDestination(LedgerError):
    """Same-chain transfers settle directly and need no condition."""


class InvalidBlock(LedgerError):
    """A block body contains an invalid transaction; the block must be discarded."""

    def __init__(self, block_id, tx_id, reason):
        super().__init__(f"block {block_id!r} invalid: transaction {tx_id!r} {reason}")
        self.block_id = block_id
        self.tx_id = tx_id
        self.reason = reason


@dataclass(frozen=True)
class Transaction:
    tx_id: str
    origin: ChainPath
    destination: ChainPath
    asset: str
    sender: str
    new_owner: str
    injected_time: float = 0.0


@dataclass(frozen=True)
class SettlementCondition:
    """What must appear on the ancestor chain before a cross-chain credit.

    `first_link` is the pair of chains the first shared block must belong
    to; `second_link` is present only when the destination lies below the
    ancestor and must be satisfied strictly after the first.
    """

    tx_id: str
    ancestor: ChainPath
    first_link: tuple[ChainPath, ChainPath]
    second_link: tuple[ChainPath, ChainPath] | None


def settlement_condition_for(tx: Transaction) -> SettlementCondition:
    if tx.origin == tx.destination:
        raise SameOriginDestination(f"transaction {tx.tx_id} settles at its origin chain")
    ancestor = common_ancestor(tx.origin, tx.destination)
    second = (tx.destination, ancestor) if len(tx.destination) > len(ancestor) else None
    return SettlementCondition(tx.tx_id, ancestor, (tx.origin, ancestor), second)


def validate_transaction(tx: Transaction, origin_state: "PartitionState", sender: str, in_flight=()) -> str | None:
    """None when valid, otherwise the rejection reason."""
    owner = origin_state.owned.get(tx.asset)
    if owner is not None:
        return None if owner == sender else WRONG_OWNER
    if tx.asset in in_flight:
        return ASSET_IN_FLIGHT
    return ASSET_ABSENT


@dataclass(frozen=True)
class PendingEntry:
    """A committed cross-chain transfer waiting at its destination partition."""

    tx_id: str
    origin: ChainPath
    ancestor: ChainPath
    commit_block: object
    commit_height: int
    commit_index: int
    link_block: object
    needs_second_link: bool


@dataclass
class PartitionState:
    """Asset ownership for one chain plus transfers waiting to credit it."""

    chain: ChainPath
    owned: dict[str, str] = field(default_factory=dict)
    pending: dict[str, PendingEntry] = field(default_factory=dict)


@dataclass(frozen=True)
class DivergenceReport:
    chain: ChainPath
    kind: str
    detail: str


def compare_partitions(a: PartitionState, b: PartitionState, compare_pending: bool = True) -> DivergenceReport | None:
    """Deep-compare two partitions; None when equal."""
    if a.owned != b.owned:
        for asset in sorted(set(a.owned) | set(b.owned)):
            if a.owned.get(asset) != b.owned.get(asset):
                return DivergenceReport(
                    a.chain,
                    "owner",
                    f"asset {asset!r}: {a.owned.get(asset)!r} vs {b.owned.get(asset)!r}",
                )
    if compare_pending and a.pending != b.pending:
        for tx in sorted(set(a.pending) | set(b.pending)):
            if a.pending.get(tx) != b.pending.get(tx):
                return DivergenceReport(a.chain, "pending", f"transaction {tx!r} differs")
    return None


def check_state_consistency(ledger_a: "Ledger", ledger_b: "Ledger", chain: ChainPath, compare_pending: bool = True):
    """Compare one chain's partition between two replicas.

    Callers must first check the precondition that both replicas agree on
    the chain's canonical block list; comparing partitions across different
    forks is not meaningful. Pending queues additionally depend on ancestor
    chains, so pass compare_pending=False unless the ancestors agree too.
    """
    return compare_partitions(ledger_a.partitions[chain], ledger_b.partitions[chain], compare_pending)


@dataclass
class _Delta:
    stamp: int
    ops: list


class Ledger:
    """All partition states of one replica, updated block by block.

    `positions(chain, block_id)` must resolve to the block's height in the
    replica's *current* canonical chain (None if not canonical); `archive`
    maps every block id the network ever produced to its Block, standing in
    for the proof data a real node would fetch from its peers.
    """

    def __init__(
        self,
        config: HierarchyConfig,
        tracked,
        genesis_owners: dict[ChainPath, dict[str, str]],
        registry: dict[str, Transaction],
        archive: dict[object, Block],
        positions,
        genesis_id="genesis",
    ):
        self.config = config
        self.tracked = frozenset(tracked)
        self.registry = registry
        self.archive = archive
        self.positions = positions
        self.genesis_id = genesis_id
        self.partitions = {
            chain: PartitionState(chain, dict(genesis_owners.get(chain, {}))) for chain in self.tracked
        }
        self.in_flight: dict[str, str] = {}  # asset -> tx id, debited and unsettled
        self.committed: dict[ChainPath, set[str]] = {c: set() for c in self.tracked}
        self.settled: dict[str, ChainPath] = {}
        # (relay chain, origin chain) -> (block id, height) of the deepest
        # origin-chain block whose history this replica has ingested via a
        # shared block on the relay chain.
        self.watermarks: dict[tuple[ChainPath, ChainPath], tuple[object, int]] = {}
        self.deltas: dict[tuple[ChainPath, object], _Delta] = {}
        self._stamp = itertools.count()
        self.recorder = None
        self.now = 0.0

    # ------------------------------------------------------------- plumbing

    def _record(self, method, tx_id):
        if self.recorder is not None:
            getattr(self.recorder, method)(tx_id, self.now)

    def _set_in_flight_for(self, tx: Transaction):
        # Membership rule: committed at a tracked origin, cross-chain, and
        # not settled. Evaluated whenever a commit/settle edge moves.
        if (
            tx.origin != tx.destination
            and tx.tx_id in self.committed.get(tx.origin, ())
            and tx.tx_id not in self.settled
        ):
            self.in_flight[tx.asset] = tx.tx_id
        elif self.in_flight.get(tx.asset) == tx.tx_id:
            del self.in_flight[tx.asset]

    # ---------------------------------------------------------------- apply

    def apply_block(self, block: Block, chain: ChainPath):
        """Apply one block newly appended to `chain`'s canonical chain.

        Order of effects: ingest origin histories pinned by a shared block,
        then settle eligible inbound transfers (deepest origin order first,
        then left-to-right origin chain, then origin-chain order), then this
        chain's own transaction body in listed order.
        """
        if block.id == self.genesis_id:
            return
        key = (chain, block.id)
        assert key not in self.deltas, f"block {block.id!r} already applied to {chain!r}"
        ops = []
        try:
            self._ingest_pinned(block, chain, ops)
            self._settle_inbound(block, chain, ops)
            self._apply_body(block, chain, ops)
        except InvalidBlock:
            self._undo_ops(ops)
            raise
        self.deltas[key] = _Delta(next(self._stamp), ops)

    def _ingest_pinned(self, block: Block, chain: ChainPath, ops: list):
        r = len(chain)
        for deeper in range(r + 1, len(block.slice) + 1):
            origin = block.chain_at(deeper)
            wm_id, wm_height = self.watermarks.get((chain, origin), (self.genesis_id, 0))
            segment = []
            cur = block
            while cur.id != wm_id:
                segment.append(cur)
                pred = cur.predecessors[deeper]
                if pred == wm_id:
                    break
                assert pred != self.genesis_id, (
                    f"shared block {block.id!r} pins an origin history that misses "
                    f"the ingested watermark {wm_id!r} for {origin!r}"
                )
                cur = self.archive[pred]
            segment.reverse()
            if not segment:
                continue
            for offset, blk in enumerate(segment):
                height = wm_height + 1 + offset
                for index, tx_id in enumerate(blk.body(deeper)):
                    tx = self.registry[tx_id]
                    if tx.destination == tx.origin:
                        continue
                    ancestor = common_ancestor(tx.origin, tx.destination)
                    if ancestor != chain or tx.destination not in self.partitions:
                        continue
                    entry = PendingEntry(
                        tx_id=tx_id,
                        origin=origin,
                        ancestor=chain,
                        commit_block=blk.id,
                        commit_height=height,
                        commit_index=index,
                        link_block=block.id,
                        needs_second_link=len(tx.destination) > len(chain),
                    )
                    self.partitions[tx.destination].pending[tx_id] = entry
                    ops.append(("entry", tx.destination, tx_id, entry))
            new_mark = (block.id, wm_height + len(segment))
            self.watermarks[(chain, origin)] = new_mark
            ops.append(("wm", chain, origin, (wm_id, wm_height), new_mark))

    def _settle_inbound(self, block: Block, chain: ChainPath, ops: list):
        part = self.partitions[chain]
        if not part.pending:
            return
        eligible = []
        for entry in part.pending.values():
            if block.achieved_order > len(entry.ancestor):
                continue  # block is not shared with the relay chain
            if entry.needs_second_link:
                link_pos = self.positions(entry.ancestor, entry.link_block)
                block_pos = self.positions(entry.ancestor, block.id)
                assert link_pos is not None and block_pos is not None
                if block_pos > link_pos:
                    eligible.append(entry)
            elif entry.link_block == block.id:
                eligible.append(entry)
        eligible.sort(key=lambda e: (-len(e.origin), e.origin, e.commit_height, e.commit_index))
        for entry in eligible:
            tx = self.registry[entry.tx_id]
            del part.pending[entry.tx_id]
            part.owned[tx.asset] = tx.new_owner
            self.settled[entry.tx_id] = chain
            self._set_in_flight_for(tx)
            ops.append(("settle", chain, entry.tx_id, entry))
            self._record("on_settle", entry.tx_id)

    def _apply_body(self, block: Block, chain: ChainPath, ops: list):
        part = self.partitions[chain]
        for index, tx_id in enumerate(block.body(len(chain))):
            tx = self.registry[tx_id]
            if tx.origin != chain:
                raise InvalidBlock(block.id, tx_id, "foreign-origin")
            reason = validate_transaction(tx, part, tx.sender, self.in_flight)
            if reason is not None:
                raise InvalidBlock(block.id, tx_id, reason)
            if tx.destination == chain:
                old = part.owned[tx.asset]
                part.owned[tx.asset] = tx.new_owner
                ops.append(("move", chain, tx.asset, old, tx.new_owner))
            else:
                owner = part.owned.pop(tx.asset)
                ops.append(("debit", chain, tx_id, tx.asset, owner))
                ancestor = common_ancestor(tx.origin, tx.destination)
                if ancestor == chain and tx.destination in self.partitions:
                    # Destination sits below this chain: the commit itself is
                    # the first link of the settlement condition.
                    height = self.positions(chain, block.id)
                    assert height is not None
                    entry = PendingEntry(
                        tx_id=tx_id,
                        origin=chain,
                        ancestor=chain,
                        commit_block=block.id,
                        commit_height=height,
                        commit_index=index,
                        link_block=block.id,
                        needs_second_link=True,
                    )
                    self.partitions[tx.destination].pending[tx_id] = entry
                    ops.append(("entry", tx.destination, tx_id, entry))
            self.committed[chain].add(tx_id)
            self._set_in_flight_for(tx)
            ops.append(("commit", chain, tx_id))
            self._record("on_commit", tx_id)

    # --------------------------------------------------------------- revert

    def revert_block(self, block: Block, chain: ChainPath):
        """Exact inverse of apply_block for a block leaving the canonical chain."""
        if block.id == self.genesis_id:
            return
        delta = self.deltas.pop((chain, block.id))
        self._undo_ops(delta.ops)

    def _undo_ops(self, ops: list):
        for op in reversed(ops):
            kind = op[0]
            if kind == "commit":
                _, chain, tx_id = op
                tx = self.registry[tx_id]
                self.committed[chain].discard(tx_id)
                self._set_in_flight_for(tx)
                self._record("on_uncommit", tx_id)
            elif kind == "debit":
                _, chain, tx_id, asset, owner = op
                self.partitions[chain].owned[asset] = owner
            elif kind == "move":
                _, chain, asset, old, _new = op
                self.partitions[chain].owned[asset] = old
            elif kind == "entry":
                _, dest, tx_id, _entry = op
                del self.partitions[dest].pending[tx_id]
            elif kind == "settle":
                _, chain, tx_id, entry = op
                tx = self.registry[tx_id]
                del self.partitions[chain].owned[tx.asset]
                self.partitions[chain].pending[tx_id] = entry
                del self.settled[tx_id]
                self._set_in_flight_for(tx)
                self._record("on_unsettle", tx_id)
            elif kind == "wm":
                _, chain, origin, pre, _post = op
                if pre == (self.genesis_id, 0):
                    self.watermarks.pop((chain, origin), None)
                else:
                    self.watermarks[(chain, origin)] = pre
            else:  # pragma: no cover - op kinds are closed
                raise AssertionError(f"unknown op {kind}")

    # ----------------------------------------------------------- plan driver

    def apply_plans(self, plans: list[ReorgPlan], blocks: dict):
        """Execute reorg plans: all reverts newest-first, then applies.

        Reverting in global last-in-first-out order (by apply stamp) makes
        the combined undo exact even when one reorg spans several chains.
        Raises InvalidBlock with the ledger rolled back to the state before
        this call.
        """
        reverts = [(chain_plan.chain, bid) for chain_plan in plans for bid in chain_plan.revert]
        reverts.sort(key=lambda item: self.deltas[item].stamp, reverse=True)
        journal = []
        try:
            for chain, bid in reverts:
                delta = self.deltas[(chain, bid)]
                self.revert_block(blocks[bid], chain)
                journal.append(("reverted", chain, bid, delta))
            for chain_plan in plans:
                for bid in chain_plan.apply:
                    self.apply_block(blocks[bid], chain_plan.chain)
                    journal.append(("applied", chain_plan.chain, bid))
        except InvalidBlock:
            for item in reversed(journal):
                if item[0] == "applied":
                    _, chain, bid = item
                    self.revert_block(blocks[bid], chain)
                else:
                    _, chain, bid, delta = item
                    self._redo_ops(delta.ops)
                    self.deltas[(chain, bid)] = delta
            raise

    def _redo_ops(self, ops: list):
        # Mechanical re-application of recorded ops (used only to undo a
        # revert when a batch fails mid-way); mirrors apply exactly.
        for op in ops:
            kind = op[0]
            if kind == "commit":
                _, chain, tx_id = op
                self.committed[chain].add(tx_id)
                self._set_in_flight_for(self.registry[tx_id])
            elif kind == "debit":
                _, chain, tx_id, asset, _owner = op
                del self.partitions[chain].owned[asset]
            elif kind == "move":
                _, chain, asset, _old, new = op
                self.partitions[chain].owned[asset] = new
            elif kind == "entry":
                _, dest, tx_id, entry = op
                self.partitions[dest].pending[tx_id] = entry
            elif kind == "settle":
                _, chain, tx_id, entry = op
                tx = self.registry[tx_id]
                del self.partitions[chain].pending[tx_id]
                self.partitions[chain].owned[tx.asset] = tx.new_owner
                self.settled[tx_id] = chain
                self._set_in_flight_for(tx)
            elif kind == "wm":
                _, chain, origin, _pre, post = op
                self.watermarks[(chain, origin)] = post

    # ------------------------------------------------------------ invariants

    def asset_residences(self) -> dict[str, list]:
        """Where every asset currently lives; each list should have length 1.

        Meaningful on a replica that tracks every chain (an observer): an
        asset is either owned by exactly one partition or in flight between
        a debited origin and an unsettled destination.
        """
        residences: dict[str, list] = {}
        for chain in sorted(self.partitions):
            for asset in self.partitions[chain].owned:
                residences.setdefault(asset, []).append(("owned", chain))
        for asset, tx_id in self.in_flight.items():
            residences.setdefault(asset, []).append(("in-flight", tx_id))
        return residences

    def conservation_violations(self, seeded_assets) -> list[str]:
        residences = self.asset_residences()
        problems = []
        for asset in seeded_assets:
            places = residences.get(asset, [])
            if len(places) != 1:
                problems.append(f"asset {asset!r} resides in {places!r}")
        return problems


def replay_canonical(
    config: HierarchyConfig,
    tracked,
    genesis_owners,
    registry,
    archive,
    canonical: dict[ChainPath, list],
    genesis_id="genesis",
) -> Ledger:
    """Fresh ledger built by replaying final canonical chains root-first.

    Settlement only ever consumes information from ancestor chains, so
    replaying each chain completely, parents before children, reproduces the
    state an always-online replica reaches incrementally.
    """
    index = {chain: {bid: i for i, bid in enumerate(ids)} for chain, ids in canonical.items()}
    ledger = Ledger(
        config,
        tracked,
        genesis_owners,
        registry,
        archive,
        positions=lambda chain, bid: index[chain].get(bid),
        genesis_id=genesis_id,
    )
    for chain in config.all_chains():
        if chain not in ledger.partitions or chain not in canonical:
            continue
        for bid in canonical[chain]:
            if bid == genesis_id:
                continue
            ledger.apply_block(archive[bid], chain)
    return ledger
