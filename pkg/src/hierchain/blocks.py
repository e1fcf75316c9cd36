"""Block structure and the nested per-order difficulty schedule.

Work is simulated rather than hashed: each mining attempt is a uniform
sample in [0, 1), and the schedule's thresholds decide the hardest order the
sample meets. A block meeting order r's threshold also meets every easier
order, so low-order blocks are shared ("coincident") across all the chains
of the miner's slice at orders >= the achieved order.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field

from .hierarchy import ChainPath


class ScheduleError(ValueError):
    pass


class OrderOutOfRange(ScheduleError):
    pass


class SampleMeetsNoThreshold(ScheduleError):
    """The work sample does not even meet the leaf threshold (caller bug)."""


@dataclass(frozen=True)
class DifficultySchedule:
    """Per-order success probabilities p_1 < p_2 < ... < p_R.

    p_r is the probability that a single uniform work sample meets order r's
    requirement; order 1 (the root) is the hardest. Strict nesting means a
    sample meeting order r also meets every order above r numerically.
    """

    thresholds: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(p) for p in self.thresholds))
        if not self.thresholds:
            raise ScheduleError("schedule needs at least one threshold")
        for p in self.thresholds:
            if not 0.0 < p <= 1.0:
                raise ScheduleError(f"thresholds must lie in (0, 1], got {p}")
        for a, b in zip(self.thresholds, self.thresholds[1:]):
            if not a < b:
                raise ScheduleError(f"thresholds must be strictly increasing, got {self.thresholds}")

    @classmethod
    def from_leading_zero_bits(cls, bits: list[int]) -> "DifficultySchedule":
        """Convert per-order leading-zero-bit requirements to probabilities."""
        return cls(tuple(2.0 ** -b for b in bits))

    @property
    def num_orders(self) -> int:
        return len(self.thresholds)

    def threshold(self, r: int) -> float:
        if not 1 <= r <= len(self.thresholds):
            raise OrderOutOfRange(f"order {r} out of range 1..{len(self.thresholds)}")
        return self.thresholds[r - 1]

    def weight(self, r: int) -> float:
        """Chain weight contributed by a block counted at order r.

        1/p_r is the expected number of attempts behind one order-r block,
        which makes heaviest-chain comparisons meaningful when blocks of
        different achieved orders share a chain.
        """
        return 1.0 / self.threshold(r)


def classify_order(work_sample: float, schedule: DifficultySchedule) -> int:
    """Hardest (lowest) order whose threshold the sample meets."""
    if not 0.0 <= work_sample:
        raise SampleMeetsNoThreshold(f"work sample {work_sample} is not a probability")
    r = bisect_right(schedule.thresholds, work_sample) + 1
    if r > schedule.num_orders:
        raise SampleMeetsNoThreshold(
            f"sample {work_sample} does not meet the leaf threshold {schedule.thresholds[-1]}"
        )
    return r


def coincidence_probability(schedule: DifficultySchedule, from_order: int, to_order: int) -> float:
    """Probability that a block meeting `from_order` also meets `to_order`.

    `to_order` must be at or above `from_order` in the tree (numerically <=).
    """
    if to_order > from_order:
        raise OrderOutOfRange(f"to_order {to_order} must be <= from_order {from_order}")
    return schedule.threshold(to_order) / schedule.threshold(from_order)


@dataclass(frozen=True)
class Block:
    """One mined block, possibly a member of several chains at once.

    `slice` is the root-to-leaf list of chains the block was mined on.
    The block is a member of every chain in the slice at orders >=
    `achieved_order`; for each of those orders it carries the id of its
    predecessor in that chain and the transaction body committed there.
    """

    id: object
    slice: tuple[ChainPath, ...]
    achieved_order: int
    predecessors: dict[int, object]
    bodies: dict[int, tuple[str, ...]] = field(default_factory=dict)
    found_time: float = 0.0
    miner: object = None

    def __post_init__(self):
        object.__setattr__(self, "slice", tuple(self.slice))
        num_orders = len(self.slice)
        if num_orders == 0:
            raise ValueError("block slice is empty")
        for k, chain in enumerate(self.slice):
            if len(chain) != k + 1 or not chain.is_prefix_of(self.slice[-1]):
                raise ValueError(f"slice must be the prefixes of its leaf, got {self.slice}")
        if not 1 <= self.achieved_order <= num_orders:
            raise ValueError(f"achieved_order {self.achieved_order} out of range 1..{num_orders}")
        expected = set(range(self.achieved_order, num_orders + 1))
        if set(self.predecessors) != expected:
            raise ValueError(
                f"predecessors must cover orders {sorted(expected)}, got {sorted(self.predecessors)}"
            )
        if not set(self.bodies) <= expected:
            raise ValueError("transaction bodies listed for orders the block is not a member of")

    @property
    def chains(self) -> tuple[ChainPath, ...]:
        """Chains this block is a member of (orders achieved..R of its slice)."""
        return self.slice[self.achieved_order - 1 :]

    @property
    def is_coincident(self) -> bool:
        """True when shared by more than one chain of its slice."""
        return self.achieved_order < len(self.slice)

    def chain_at(self, r: int) -> ChainPath:
        return self.slice[r - 1]

    def body(self, r: int) -> tuple[str, ...]:
        return self.bodies.get(r, ())
