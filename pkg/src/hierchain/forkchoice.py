"""Canonical-chain selection for every chain in the hierarchy.

The root chain uses plain heaviest-chain selection. Every other chain is
constrained by its parent: its canonical chain must contain exactly the
blocks it shares with the parent that are canonical *in the parent*, in the
same relative order, no matter how much weight a competing fork has. A
shared block therefore leaves a child's canonical chain only when the
parent reorgs it out first, and parent reorgs cascade downward.

Ties between equally heavy forks break by first-received time, then by
block id, so selection is a total order and runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .forest import BlockForest
from .hierarchy import ChainPath


@dataclass
class ReorgPlan:
    """Blocks to revert (tip first) and apply (fork point first) in one chain."""

    chain: ChainPath
    revert: list = field(default_factory=list)
    apply: list = field(default_factory=list)


class CanonicalView:
    """Current canonical chain of every tracked chain, with fast lookups.

    `canonical[c]` lists block ids genesis first; `index[c]` maps a canonical
    block id to its height; `shared[c]` caches, for each non-root chain, the
    parent-canonical blocks it shares with its parent (in parent order).
    `recompute_view` mutates the view in place.
    """

    def __init__(self, forest: BlockForest):
        g = forest.genesis_id
        self.chains = [c for c in forest.config.all_chains() if c in forest.tracked]
        self.tips: dict[ChainPath, object] = {c: g for c in self.chains}
        self.canonical: dict[ChainPath, list] = {c: [g] for c in self.chains}
        self.index: dict[ChainPath, dict] = {c: {g: 0} for c in self.chains}
        self.shared: dict[ChainPath, list] = {c: [g] for c in self.chains if len(c) > 1}
        self.parent_of = {c: ChainPath(c[:-1]) for c in self.chains if len(c) > 1}

    @classmethod
    def initial(cls, forest: BlockForest) -> "CanonicalView":
        """View over an already-populated forest."""
        view = cls(forest)
        recompute_view(forest, view)
        return view

    def position(self, chain: ChainPath, block_id):
        return self.index[chain].get(block_id)

    def snapshot(self) -> dict[ChainPath, tuple]:
        return {c: tuple(ids) for c, ids in self.canonical.items()}


def _best_tip(forest: BlockForest, chain: ChainPath, candidates):
    # Heaviest first; earlier arrival then smaller id break ties.
    return min(
        candidates,
        key=lambda b: (-forest.cweight[(chain, b)], forest.arrival(b), b),
    )


def select_canonical_root(forest: BlockForest) -> list:
    """Heaviest valid chain of the root, genesis first."""
    root = forest.config.all_chains()[0]
    tip = _best_tip(forest, root, forest.tips[root])
    return forest.path_from_genesis(root, tip)


def select_canonical_child(forest: BlockForest, chain: ChainPath, parent_canonical: list) -> list:
    """Heaviest chain of `chain` consistent with its parent's canonical chain.

    Candidate chains must contain all blocks shared with the parent that
    appear in `parent_canonical` and none of the shared blocks that do not.
    A compliant chain always exists: the shared blocks themselves form one.
    """
    shared = [b for b in parent_canonical if forest.is_member(b, chain)]
    anchor = shared[-1]  # deepest parent-canonical shared block; genesis at minimum
    candidates = forest.region_tips.get((chain, anchor))
    assert candidates, f"no compliant chain in {chain!r} above {anchor!r}"
    tip = _best_tip(forest, chain, candidates)
    path = forest.path_from_genesis(chain, tip)
    parent = ChainPath(chain[:-1])
    on_path = [b for b in path if forest.is_member(b, parent)]
    assert on_path == shared, f"selected chain of {chain!r} breaks parent coupling"
    return path


def recompute_view(
    forest: BlockForest,
    view: CanonicalView,
    dirty=None,
) -> tuple[CanonicalView, list[ReorgPlan]]:
    """Refresh canonical chains top-down and report what changed.

    `dirty` names chains that received new blocks; descendants re-select
    automatically when their parent's shared-block sequence changes. Plans
    come out root first (parents before children), each with reverts tip
    first and applies fork-point first.
    """
    dirty = set(view.chains if dirty is None else dirty)
    plans: list[ReorgPlan] = []
    plan_by_chain: dict[ChainPath, ReorgPlan] = {}

    for chain in view.chains:
        shared_changed = False
        if len(chain) > 1:
            parent_plan = plan_by_chain.get(view.parent_of[chain])
            if parent_plan is not None:
                shared = view.shared[chain]
                for bid in parent_plan.revert:
                    if forest.is_member(bid, chain):
                        assert shared and shared[-1] == bid, "shared blocks must revert from the end"
                        shared.pop()
                        shared_changed = True
                for bid in parent_plan.apply:
                    if forest.is_member(bid, chain):
                        shared.append(bid)
                        shared_changed = True
        if chain not in dirty and not shared_changed:
            continue

        if len(chain) == 1:
            new_tip = _best_tip(forest, chain, forest.tips[chain])
        else:
            anchor = view.shared[chain][-1]
            candidates = forest.region_tips.get((chain, anchor))
            assert candidates, f"no compliant chain in {chain!r} above {anchor!r}"
            new_tip = _best_tip(forest, chain, candidates)

        old_tip = view.tips[chain]
        if new_tip == old_tip:
            continue
        plan = _rewrite_canonical(forest, view, chain, new_tip)
        plans.append(plan)
        plan_by_chain[chain] = plan

    return view, plans


def undo_plans(forest: BlockForest, view: CanonicalView, plans: list[ReorgPlan]):
    """Restore the view to its state before recompute_view produced `plans`.

    Used when state application rejects a block mid-batch and the whole
    canonical update must be withdrawn before re-selecting without it.
    """
    by_chain = {p.chain: p for p in plans}
    for chain in reversed(view.chains):
        plan = by_chain.get(chain)
        if plan is not None:
            canonical = view.canonical[chain]
            index = view.index[chain]
            assert canonical[len(canonical) - len(plan.apply) :] == plan.apply
            for bid in plan.apply:
                del index[bid]
            del canonical[len(canonical) - len(plan.apply) :]
            for bid in reversed(plan.revert):
                index[bid] = len(canonical)
                canonical.append(bid)
            view.tips[chain] = canonical[-1]
        if len(chain) > 1:
            parent_plan = by_chain.get(view.parent_of[chain])
            if parent_plan is not None:
                shared = view.shared[chain]
                for bid in reversed(parent_plan.apply):
                    if forest.is_member(bid, chain):
                        assert shared and shared[-1] == bid
                        shared.pop()
                for bid in reversed(parent_plan.revert):
                    if forest.is_member(bid, chain):
                        shared.append(bid)


def _rewrite_canonical(forest: BlockForest, view: CanonicalView, chain: ChainPath, new_tip) -> ReorgPlan:
    index = view.index[chain]
    canonical = view.canonical[chain]

    suffix = []
    cur = new_tip
    while cur not in index:
        suffix.append(cur)
        cur = forest.pred_in_chain(cur, chain)
    suffix.reverse()
    fork_height = index[cur]

    revert = list(reversed(canonical[fork_height + 1 :]))
    for bid in revert:
        del index[bid]
    del canonical[fork_height + 1 :]
    for bid in suffix:
        index[bid] = len(canonical)
        canonical.append(bid)
    view.tips[chain] = new_tip
    return ReorgPlan(chain, revert, suffix)
