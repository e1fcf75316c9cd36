"""Append-only block store with per-chain indexes and orphan buffering.

One forest belongs to one validating node. It tracks a subset of chains
(all of them for observers and unit tests, a single root-to-leaf slice for
a mining node) and only indexes a block's membership in tracked chains.

Blocks whose predecessors are unknown are buffered and re-evaluated when
later admissions resolve them; blocks with an invalid predecessor are
rejected, and invalidity propagates to all descendants.
"""

from __future__ import annotations

import itertools
from enum import Enum

from .blocks import Block, DifficultySchedule
from .hierarchy import ChainPath, HierarchyConfig

GENESIS_ID = "genesis"


class Admission(Enum):
    ADMITTED = "admitted"
    BUFFERED = "buffered"
    REJECTED = "rejected-invalid"
    DUPLICATE = "duplicate"


class BlockForest:
    """All blocks this node has accepted, plus per-chain selection indexes.

    The genesis block is a synthetic order-1 block present in every chain;
    it is represented by its id only and sits at height 0 / weight 0 in each
    tracked chain.
    """

    def __init__(
        self,
        config: HierarchyConfig,
        schedule: DifficultySchedule,
        genesis_id=GENESIS_ID,
        tracked=None,
    ):
        if schedule.num_orders != config.num_orders:
            raise ValueError("difficulty schedule and hierarchy disagree on the number of orders")
        self.config = config
        self.schedule = schedule
        self.genesis_id = genesis_id
        all_chains = config.all_chains()
        self.tracked = frozenset(all_chains if tracked is None else tracked)
        for c in self.tracked:
            config.require_valid(c)

        self.blocks: dict[object, Block] = {}
        self.invalid: set[object] = set()
        self.buffered: dict[object, Block] = {}
        self._waiting: dict[object, set[object]] = {}  # missing pred id -> waiting block ids
        self._buffer_seq: dict[object, int] = {}  # first-seen order of buffered blocks

        # Per-(chain, block) indexes over admitted, valid blocks.
        self.children: dict[tuple[ChainPath, object], set[object]] = {}
        self.height: dict[tuple[ChainPath, object], int] = {}
        self.cweight: dict[tuple[ChainPath, object], float] = {}
        self.tips: dict[ChainPath, set[object]] = {}
        # Nearest ancestor-or-self (per chain) that is shared with the parent
        # chain; genesis counts as shared. Drives child-chain selection.
        self.last_shared: dict[tuple[ChainPath, object], object] = {}
        # For each shared block X of a chain: the admitted blocks above X that
        # have no non-shared child, i.e. the candidate tips of X's region.
        self.region_tips: dict[tuple[ChainPath, object], set[object]] = {}

        self._arrival: dict[object, int] = {genesis_id: -1}
        self._arrival_counter = itertools.count()

        for chain in self.tracked:
            self.height[(chain, genesis_id)] = 0
            self.cweight[(chain, genesis_id)] = 0.0
            self.tips[chain] = {genesis_id}
            self.last_shared[(chain, genesis_id)] = genesis_id
            self.region_tips[(chain, genesis_id)] = {genesis_id}

    # ------------------------------------------------------------------ info

    def is_member(self, block_id, chain: ChainPath) -> bool:
        """Membership by block structure; genesis belongs to every chain."""
        if block_id == self.genesis_id:
            return True
        block = self.blocks.get(block_id)
        if block is None:
            return False
        return len(chain) >= block.achieved_order and block.chain_at(len(chain)) == chain

    def tracked_chains_of(self, block: Block) -> list[ChainPath]:
        return [c for c in block.chains if c in self.tracked]

    def arrival(self, block_id) -> int:
        return self._arrival[block_id]

    def pred_in_chain(self, block_id, chain: ChainPath):
        if block_id == self.genesis_id:
            return None
        return self.blocks[block_id].predecessors[len(chain)]

    def path_from_genesis(self, chain: ChainPath, tip_id) -> list:
        """Block ids from genesis to `tip_id` along `chain`'s predecessors."""
        out = []
        cur = tip_id
        while cur is not None:
            out.append(cur)
            cur = self.pred_in_chain(cur, chain)
        out.reverse()
        if out[0] != self.genesis_id:
            raise ValueError(f"path from {tip_id} does not reach genesis in {chain!r}")
        return out

    # ------------------------------------------------------------- admission

    def admit(self, block: Block) -> tuple[Admission, list[Block]]:
        """Admit one block, then drain any buffered blocks it unblocks.

        Returns the admission result for `block` itself plus every block
        (including `block`) newly admitted by the cascade.
        """
        result = self._admit_one(block)
        admitted = [block] if result is Admission.ADMITTED else []
        if result in (Admission.ADMITTED, Admission.REJECTED):
            admitted.extend(self._drain(block.id))
        return result, admitted

    def _admit_one(self, block: Block) -> Admission:
        if block.id in self.blocks or block.id in self.buffered:
            return Admission.DUPLICATE
        if block.id in self.invalid:
            return Admission.DUPLICATE
        if block.id == self.genesis_id:
            return Admission.DUPLICATE
        if len(block.slice) != self.config.num_orders or not self.config.is_valid_path(block.slice[-1]):
            self.invalid.add(block.id)
            return Admission.REJECTED

        chains = self.tracked_chains_of(block)
        missing = set()
        for chain in chains:
            pred = block.predecessors[len(chain)]
            if pred in self.invalid:
                self.invalid.add(block.id)
                return Admission.REJECTED
            if pred != self.genesis_id and pred not in self.blocks:
                missing.add(pred)
            elif not self.is_member(pred, chain):
                # Structurally broken reference: predecessor is not a block
                # of the same chain.
                self.invalid.add(block.id)
                return Admission.REJECTED
        if missing:
            self.buffered[block.id] = block
            self._buffer_seq.setdefault(block.id, len(self._buffer_seq))
            for pred in missing:
                self._waiting.setdefault(pred, set()).add(block.id)
            return Admission.BUFFERED

        self._index(block, chains)
        return Admission.ADMITTED

    def _drain(self, resolved_id) -> list[Block]:
        """Re-evaluate buffered blocks once `resolved_id` is decided."""
        admitted = []
        queue = [resolved_id]
        while queue:
            ready = self._waiting.pop(queue.pop(), set())
            for bid in sorted(ready, key=lambda b: self._buffer_order(b)):
                block = self.buffered.get(bid)
                if block is None:
                    continue
                still_missing = False
                for chain in self.tracked_chains_of(block):
                    pred = block.predecessors[len(chain)]
                    if pred in self.invalid:
                        del self.buffered[bid]
                        self.invalid.add(bid)
                        queue.append(bid)
                        still_missing = True
                        break
                    if pred != self.genesis_id and pred not in self.blocks:
                        self._waiting.setdefault(pred, set()).add(bid)
                        still_missing = True
                        break
                    if not self.is_member(pred, chain):
                        del self.buffered[bid]
                        self.invalid.add(bid)
                        queue.append(bid)
                        still_missing = True
                        break
                if still_missing:
                    continue
                del self.buffered[bid]
                self._index(block, self.tracked_chains_of(block))
                admitted.append(block)
                queue.append(bid)
        return admitted

    def _buffer_order(self, block_id) -> int:
        # Deterministic drain order: by the order blocks were first seen.
        return self._buffer_seq[block_id]

    def _index(self, block: Block, chains: list[ChainPath]):
        self.blocks[block.id] = block
        self._arrival[block.id] = next(self._arrival_counter)
        for chain in chains:
            r = len(chain)
            pred = block.predecessors[r]
            key = (chain, block.id)
            self.height[key] = self.height[(chain, pred)] + 1
            self.cweight[key] = self.cweight[(chain, pred)] + self.schedule.weight(r)
            self.children.setdefault((chain, pred), set()).add(block.id)
            tips = self.tips[chain]
            tips.discard(pred)
            tips.add(block.id)
            if r == 1:
                continue  # region bookkeeping only matters below the root
            shared = block.achieved_order < r or block.id == self.genesis_id
            if shared:
                self.last_shared[key] = block.id
                self.region_tips[(chain, block.id)] = {block.id}
            else:
                anchor = self.last_shared[(chain, pred)]
                self.last_shared[key] = anchor
                region = self.region_tips[(chain, anchor)]
                region.discard(pred)
                region.add(block.id)

    # ---------------------------------------------------------- invalidation

    def mark_invalid(self, block_id) -> list[Block]:
        """Mark an admitted block and all its descendants invalid.

        Used when state application discovers a rule violation. Returns the
        removed blocks (parents before children). Buffered blocks waiting on
        any of them are rejected as well.
        """
        if block_id not in self.blocks:
            if block_id not in self.invalid:
                self.invalid.add(block_id)
                self._drain(block_id)  # reject buffered dependents
            return []
        doomed = [block_id]
        seen = {block_id}
        i = 0
        while i < len(doomed):
            cur = doomed[i]
            i += 1
            block = self.blocks[cur]
            for chain in self.tracked_chains_of(block):
                for child in self.children.get((chain, cur), ()):
                    if child not in seen:
                        seen.add(child)
                        doomed.append(child)
        removed = [self.blocks[bid] for bid in doomed]
        for bid in doomed:
            self._unindex(bid)
            self.invalid.add(bid)
        for bid in doomed:
            self._drain(bid)  # reject buffered dependents
        return removed

    def _unindex(self, block_id):
        block = self.blocks.pop(block_id)
        for chain in self.tracked_chains_of(block):
            r = len(chain)
            key = (chain, block_id)
            pred = block.predecessors[r]
            self.height.pop(key, None)
            self.cweight.pop(key, None)
            siblings = self.children.get((chain, pred))
            if siblings is not None:
                siblings.discard(block_id)
            self.children.pop((chain, block_id), None)
            tips = self.tips[chain]
            tips.discard(block_id)
            if not self.children.get((chain, pred)) and (pred in self.blocks or pred == self.genesis_id):
                tips.add(pred)
            if r == 1:
                continue
            shared = block.achieved_order < r
            if shared:
                self.region_tips.pop((chain, block_id), None)
            else:
                anchor = self.last_shared.get(key)
                region = self.region_tips.get((chain, anchor))
                if region is not None:
                    region.discard(block_id)
                    if self._is_region_tip(chain, pred, anchor):
                        region.add(pred)
            self.last_shared.pop(key, None)

    def _is_region_tip(self, chain: ChainPath, block_id, anchor) -> bool:
        if block_id != anchor and self.last_shared.get((chain, block_id)) != anchor:
            return False
        if block_id not in self.blocks and block_id != self.genesis_id:
            return False
        for child in self.children.get((chain, block_id), ()):
            child_block = self.blocks[child]
            if not (child_block.achieved_order < len(chain)):
                return False
        return True
