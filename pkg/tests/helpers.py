"""Shared construction helpers for the test suite."""

from __future__ import annotations

import random

from hierchain.blocks import Block, DifficultySchedule
from hierchain.hierarchy import ChainPath, HierarchyConfig, mining_slice

CONFIG3 = HierarchyConfig(3, (2, 2))
SCHEDULE3 = DifficultySchedule.from_leading_zero_bits([12, 8, 4])
CONFIG2 = HierarchyConfig(2, (2,))
SCHEDULE2 = DifficultySchedule.from_leading_zero_bits([8, 4])
CONFIG1 = HierarchyConfig(1)
SCHEDULE1 = DifficultySchedule((2.0**-4,))


def mk_block(config, bid, leaf, achieved, preds, time=0.0, bodies=None, miner=None):
    """Block with predecessors given as {order: id} for orders achieved..R."""
    return Block(
        id=bid,
        slice=tuple(mining_slice(ChainPath(leaf), config)),
        achieved_order=achieved,
        predecessors=dict(preds),
        bodies=dict(bodies or {}),
        found_time=time,
        miner=miner,
    )


class ConsistentForestBuilder:
    """Generates random block sets whose cross-order references agree.

    Blocks are built the way miners build them: pick a leaf, pick a tip for
    the leaf chain, then for each shallower order pick a tip whose chain
    carries exactly the shared blocks already fixed by the deeper choice.
    That mirrors a miner holding *some* coupling-compliant view, so both the
    real fork choice and the brute-force one stay well defined.
    """

    def __init__(self, config: HierarchyConfig, schedule: DifficultySchedule, rng: random.Random,
                 genesis_id="genesis"):
        self.config = config
        self.schedule = schedule
        self.rng = rng
        self.genesis_id = genesis_id
        self.blocks: dict[object, Block] = {}
        self.count = 0

    def _members(self, chain):
        out = [self.genesis_id]
        out.extend(
            bid
            for bid, b in self.blocks.items()
            if b.achieved_order <= len(chain) and b.chain_at(len(chain)) == chain
        )
        return out

    def _path(self, chain, tip):
        out = []
        cur = tip
        while cur != self.genesis_id:
            out.append(cur)
            cur = self.blocks[cur].predecessors[len(chain)]
        out.append(self.genesis_id)
        out.reverse()
        return out

    def _shared_along(self, chain, tip, with_order):
        """Blocks on chain-path of `tip` that are members at `with_order`."""
        shared = []
        for bid in self._path(chain, tip):
            if bid == self.genesis_id or self.blocks[bid].achieved_order <= with_order:
                shared.append(bid)
        return shared

    def next_block(self, achieved=None) -> Block:
        rng = self.rng
        leaf = ChainPath(rng.choice(self.config.leaves()))
        num = self.config.num_orders
        if achieved is None:
            # Coincidence-heavy mix so coupling constraints get exercised.
            achieved = num
            while achieved > 1 and rng.random() < 0.35:
                achieved -= 1
        chains = mining_slice(leaf, self.config)
        preds = {}
        tip = rng.choice(self._members(chains[-1]))
        preds[num] = tip
        for r in range(num - 1, achieved - 1, -1):
            deeper_chain = chains[r]  # order r+1
            chain = chains[r - 1]
            want = self._shared_along(deeper_chain, preds[r + 1], r)
            candidates = []
            for member in self._members(chain):
                have = [
                    bid
                    for bid in self._path(chain, member)
                    if bid == self.genesis_id
                    or (
                        self.blocks[bid].achieved_order <= r + 1
                        and self.blocks[bid].chain_at(r + 1) == deeper_chain
                    )
                ]
                if have == want:
                    candidates.append(member)
            assert candidates, "no consistent predecessor available"
            preds[r] = rng.choice(candidates)
        self.count += 1
        block = mk_block(
            self.config,
            f"b{self.count:04d}",
            leaf,
            achieved,
            preds,
            time=float(self.count),
        )
        self.blocks[block.id] = block
        return block
