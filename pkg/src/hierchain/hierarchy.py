"""Tree layout of the chain hierarchy and arithmetic on chain paths.

The system operates a fixed tree of blockchains with R levels ("orders").
Order 1 is the single root chain; order R chains are the leaves. Every chain
is identified by the index path from the root, written {1}, {1,2}, {1,2,1}
and so on. Miners always work on a full root-to-leaf slice of the tree.
"""

from __future__ import annotations

from dataclasses import dataclass


class PathError(ValueError):
    """A chain path is malformed or not valid under the active hierarchy."""


class RootHasNoParent(PathError):
    pass


class NotALeaf(PathError):
    pass


class ChainPath(tuple):
    """Index path from the root identifying one chain.

    Subclasses tuple: hashing, equality and lexicographic ordering (which
    doubles as left-to-right tree order) come for free. Paths are 1-indexed
    and always start with the root index 1.
    """

    __slots__ = ()

    def __new__(cls, indices=(1,)):
        path = super().__new__(cls, indices)
        if len(path) == 0:
            raise PathError("chain path must not be empty")
        if path[0] != 1:
            raise PathError(f"chain path must start at the root index 1, got {tuple(path)}")
        if any(not isinstance(i, int) or i < 1 for i in path):
            raise PathError(f"chain path indices must be positive integers, got {tuple(path)}")
        return path

    @property
    def order(self) -> int:
        return len(self)

    def is_prefix_of(self, other: "ChainPath") -> bool:
        return len(self) <= len(other) and tuple(other[: len(self)]) == tuple(self)

    def prefixes(self) -> list["ChainPath"]:
        """All ancestors of this path including itself, root first."""
        return [ChainPath(self[:k]) for k in range(1, len(self) + 1)]

    def __repr__(self) -> str:
        return "{" + ",".join(str(i) for i in self) + "}"


ROOT = ChainPath((1,))


def parent(path: ChainPath) -> ChainPath:
    """Parent chain of `path`; the root has none."""
    if len(path) == 1:
        raise RootHasNoParent("the root chain has no parent")
    return ChainPath(path[:-1])


def order(path: ChainPath) -> int:
    return len(path)


def common_ancestor(a: ChainPath, b: ChainPath) -> ChainPath:
    """Deepest chain lying on both paths (the longest common prefix).

    Never empty: the root is an ancestor of everything.
    """
    k = 0
    for x, y in zip(a, b):
        if x != y:
            break
        k += 1
    return ChainPath(a[:k]) if k else ROOT


@dataclass(frozen=True)
class HierarchyConfig:
    """Shape of the hierarchy: number of orders and per-order branching.

    `branching[k]` is the number of children of every chain at order k+1,
    so it has length num_orders - 1. Branching is uniform within an order;
    the number of chains at order r is prod(branching[:r-1]).
    """

    num_orders: int
    branching: tuple[int, ...] = ()

    def __post_init__(self):
        if self.num_orders < 1:
            raise ValueError(f"num_orders must be >= 1, got {self.num_orders}")
        object.__setattr__(self, "branching", tuple(self.branching))
        if len(self.branching) != self.num_orders - 1:
            raise ValueError(
                f"branching must list factors for orders 1..{self.num_orders - 1}, "
                f"got {len(self.branching)} entries"
            )
        if any(not isinstance(b, int) or b < 1 for b in self.branching):
            raise ValueError(f"branching factors must be integers >= 1, got {self.branching}")

    def is_valid_path(self, path: ChainPath) -> bool:
        if len(path) < 1 or len(path) > self.num_orders:
            return False
        return all(path[k] <= self.branching[k - 1] for k in range(1, len(path)))

    def require_valid(self, path: ChainPath) -> ChainPath:
        if not self.is_valid_path(path):
            raise PathError(f"path {path!r} is not valid under this hierarchy")
        return path

    def chains_per_order(self, r: int) -> int:
        """Number of chains at order r (the q of the scaling analysis)."""
        if r < 1 or r > self.num_orders:
            raise PathError(f"order {r} out of range 1..{self.num_orders}")
        n = 1
        for b in self.branching[: r - 1]:
            n *= b
        return n

    def chains_at_order(self, r: int) -> list[ChainPath]:
        if r < 1 or r > self.num_orders:
            raise PathError(f"order {r} out of range 1..{self.num_orders}")
        paths = [ROOT]
        for k in range(1, r):
            paths = [ChainPath(p + (i,)) for p in paths for i in range(1, self.branching[k - 1] + 1)]
        return paths

    def all_chains(self) -> list[ChainPath]:
        """Every chain in the tree, root first, left to right within an order."""
        out = []
        for r in range(1, self.num_orders + 1):
            out.extend(self.chains_at_order(r))
        return out

    def leaves(self) -> list[ChainPath]:
        return self.chains_at_order(self.num_orders)

    def children_of(self, path: ChainPath) -> list[ChainPath]:
        self.require_valid(path)
        if len(path) == self.num_orders:
            return []
        return [ChainPath(path + (i,)) for i in range(1, self.branching[len(path) - 1] + 1)]


def mining_slice(leaf: ChainPath, config: HierarchyConfig) -> list[ChainPath]:
    """The root-to-leaf list of chains mined together on one combined header."""
    config.require_valid(leaf)
    if len(leaf) != config.num_orders:
        raise NotALeaf(f"{leaf!r} has order {len(leaf)}, expected leaf order {config.num_orders}")
    return leaf.prefixes()
