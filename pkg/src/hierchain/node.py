"""One validating node: block store, fork choice and ledger wired together.

A node tracks either every chain (observers, test harnesses) or the chains
of a single root-to-leaf mining slice. Received blocks go through
admission, then the canonical view is refreshed top-down and the resulting
reorg plans drive the ledger. A block whose body turns out invalid is
withdrawn: the view update is undone, the block and its descendants are
marked invalid, and selection runs again without them.
"""

from __future__ import annotations

from .blocks import Block, DifficultySchedule
from .forest import Admission, BlockForest
from .forkchoice import CanonicalView, recompute_view, undo_plans
from .hierarchy import ChainPath, HierarchyConfig
from .ledger import InvalidBlock, Ledger


class Node:
    def __init__(
        self,
        config: HierarchyConfig,
        schedule: DifficultySchedule,
        genesis_owners,
        registry,
        archive,
        tracked=None,
        genesis_id="genesis",
        node_id=None,
    ):
        self.node_id = node_id
        self.config = config
        self.archive = archive
        self.forest = BlockForest(config, schedule, genesis_id=genesis_id, tracked=tracked)
        self.view = CanonicalView(self.forest)
        self.ledger = Ledger(
            config,
            self.forest.tracked,
            genesis_owners,
            registry,
            archive,
            positions=self._position,
            genesis_id=genesis_id,
        )

    def _position(self, chain: ChainPath, block_id):
        return self.view.index[chain].get(block_id)

    def receive(self, block: Block) -> Admission:
        """Admit a block (plus any orphans it unblocks) and update state."""
        result, admitted = self.forest.admit(block)
        if admitted:
            dirty = {c for b in admitted for c in self.forest.tracked_chains_of(b)}
            self._update(dirty)
        return result

    def _update(self, dirty: set[ChainPath]):
        while True:
            _, plans = recompute_view(self.forest, self.view, dirty)
            if not plans:
                return
            try:
                self.ledger.apply_plans(plans, self.archive)
                return
            except InvalidBlock as bad:
                undo_plans(self.forest, self.view, plans)
                removed = self.forest.mark_invalid(bad.block_id)
                dirty = dirty | {c for b in removed for c in self.forest.tracked_chains_of(b)}

    # Convenience accessors used by miners, scenarios and checks.

    def canonical(self, chain: ChainPath) -> list:
        return self.view.canonical[chain]

    def tip(self, chain: ChainPath):
        return self.view.tips[chain]

    def partition(self, chain: ChainPath):
        return self.ledger.partitions[chain]
