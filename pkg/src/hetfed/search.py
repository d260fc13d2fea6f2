"""Resource-constrained model search over a growing sampling pool.

Per client per round the search starts from the largest pool member that
fits the client's budget, then keeps flipping a stop coin: with probability
epsilon it adopts the incumbent, otherwise it draws a random spec from the
space, adds it to the pool, and promotes it if it is feasible and strictly
larger.  After t_max draws the incumbent is adopted regardless; calls that
exhaust all draws are "hits" and their rate is the exploration telemetry.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

from .costs import Budget, CostParams, feasible
from .subnets import SearchSpace, SubnetSpec, full_spec, param_count, random_spec, smallest_spec


@dataclass
class SearchOutcome:
    chosen: SubnetSpec
    random_tries: int
    hit_tmax: bool
    pool_size_after: int
    # False only when even the smallest spec did not fit and it was adopted
    # as the flagged fallback.
    feasible: bool


class SamplingPool:
    """Deduplicated spec set kept sorted largest-first by parameter count
    (ties broken by ascending ratio tuples).  Always contains the smallest
    and the full spec."""

    def __init__(self, space: SearchSpace, rng: np.random.Generator | int):
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(int(rng))
        self.space = space
        self.rng = rng
        self._specs: list[SubnetSpec] = []
        self._keys: list[tuple] = []
        self._members: set[SubnetSpec] = set()
        self._counts: dict[SubnetSpec, int] = {}
        self.add(smallest_spec(space))
        self.add(full_spec(space))

    def count_of(self, spec: SubnetSpec) -> int:
        count = self._counts.get(spec)
        if count is None:
            count = param_count(self.space, spec)
            self._counts[spec] = count
        return count

    def add(self, spec: SubnetSpec) -> bool:
        """Insert a spec, keeping sort order; returns False on duplicates."""
        if spec in self._members:
            return False
        key = (-self.count_of(spec), spec.ratios)
        idx = bisect.bisect_left(self._keys, key)
        self._keys.insert(idx, key)
        self._specs.insert(idx, spec)
        self._members.add(spec)
        return True

    @property
    def specs(self) -> tuple[SubnetSpec, ...]:
        return tuple(self._specs)

    def __len__(self) -> int:
        return len(self._specs)

    def __contains__(self, spec: SubnetSpec) -> bool:
        return spec in self._members


def init_pool(space: SearchSpace, seed: np.random.Generator | int) -> SamplingPool:
    return SamplingPool(space, seed)


def pool_best_feasible(
    pool: SamplingPool, budget: Budget, batch: int, cost: CostParams
) -> SubnetSpec | None:
    """Largest pool member fitting the budget, or None if nothing fits."""
    if len(pool) == 0:
        raise ValueError("pool must not be empty")
    for spec in pool._specs:
        if feasible(pool.space, spec, batch, cost, budget):
            return spec
    return None


def search(
    pool: SamplingPool,
    budget: Budget,
    batch: int,
    cost: CostParams,
    epsilon: float,
    t_max: int,
) -> SearchOutcome:
    """Pick the client's spec for this round, expanding the pool as it goes.

    Every random draw enters the pool even if it does not fit this budget;
    it may serve a larger budget later.  When nothing in the pool fits, the
    smallest spec is adopted and flagged infeasible.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if t_max < 0:
        raise ValueError("t_max must be >= 0")

    base = pool_best_feasible(pool, budget, batch, cost)
    if base is None:
        incumbent, incumbent_fits = smallest_spec(pool.space), False
    else:
        incumbent, incumbent_fits = base, True

    tries = 0
    while tries < t_max:
        if pool.rng.random() < epsilon:
            break
        candidate = random_spec(pool.space, pool.rng)
        pool.add(candidate)
        tries += 1
        if feasible(pool.space, candidate, batch, cost, budget) and (
            not incumbent_fits or pool.count_of(candidate) > pool.count_of(incumbent)
        ):
            incumbent, incumbent_fits = candidate, True

    return SearchOutcome(
        chosen=incumbent,
        random_tries=tries,
        hit_tmax=tries == t_max,
        pool_size_after=len(pool),
        feasible=incumbent_fits,
    )


def hit_rate(outcomes: list[SearchOutcome]) -> float:
    """Fraction of search calls that exhausted all t_max random draws."""
    if not outcomes:
        raise ValueError("hit_rate needs at least one outcome")
    return sum(1 for o in outcomes if o.hit_tmax) / len(outcomes)
