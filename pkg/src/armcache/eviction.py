"""Eviction sets and parameterised eviction loops.

A strategy (N, A, D) runs over an eviction set of congruent lines::

    for i in range(0, N - D + 1, A):
        for j in range(D):
            access(members[i + j])

N=16, A=1, D=1 is the plain "LRU eviction" pass; D > 1 re-accesses lines
that were just loaded, which on a victim-filled L2 is what pushes them out
of L1 and into the targeted set.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .cachesim import CacheGeometry, DeviceProfile, Hierarchy, set_index
from .memspace import PagemapDenied, ProcessSpace


class NoPhysicalOracle(Exception):
    """Virtual-to-physical translation is unavailable (pagemap restricted)."""


class PoolExhausted(Exception):
    pass


@dataclass(frozen=True, order=True)
class EvictionStrategy:
    N: int
    A: int
    D: int

    def __post_init__(self):
        if not (1 <= self.D <= self.N and 1 <= self.A <= self.N):
            raise ValueError(f"invalid strategy {self}: need 1 <= D <= N and 1 <= A <= N")

    def trace(self) -> list[int]:
        """Member indices in access order."""
        return [i + j for i in range(0, self.N - self.D + 1, self.A) for j in range(self.D)]

    @property
    def accesses(self) -> int:
        return ((self.N - self.D) // self.A + 1) * self.D

    def __str__(self):
        return f"(N={self.N}, A={self.A}, D={self.D})"


@dataclass(frozen=True)
class EvictionSet:
    target: int
    members: tuple[int, ...]

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class EvalResult:
    avg_cycles: float
    eviction_rate: float
    trials: int = 0


def build_eviction_set(proc: ProcessSpace, target: int, pool, size: int,
                       geometry: CacheGeometry) -> EvictionSet:
    """First ``size`` pool addresses congruent to ``target`` in ``geometry``.

    Congruence is decided on physical addresses, obtained via the pagemap.
    """
    try:
        tp = proc.pagemap_query(target)
    except PagemapDenied as e:
        raise NoPhysicalOracle("no physical oracle: " + str(e)) from e
    want = set_index(geometry, tp)
    line = geometry.line_size
    members: list[int] = []
    seen = {tp // line}
    if size == 0:
        return EvictionSet(tp, ())
    for v in pool:
        p = proc.pagemap_query(v)
        if set_index(geometry, p) == want and p // line not in seen:
            seen.add(p // line)
            members.append(p)
            if len(members) == size:
                return EvictionSet(tp, tuple(members))
    raise PoolExhausted(f"only {len(members)} of {size} congruent addresses in the pool")


def congruent_addresses(geometry: CacheGeometry, target: int, count: int, start: int = 1) -> list[int]:
    """Synthetic physical addresses in the target's set (stride = one cache way)."""
    stride = geometry.sets * geometry.line_size
    return [target + k * stride for k in range(start, start + count)]


def run_pattern(hier: Hierarchy, core: int, strategy: EvictionStrategy, evset: EvictionSet) -> int:
    """Execute the loop over ``evset``; returns the summed simulated cycles."""
    if len(evset.members) < strategy.N:
        raise ValueError(f"strategy needs {strategy.N} members, eviction set has {len(evset.members)}")
    lines = hier._lines(evset.members[:strategy.N])
    return int(K.run_pattern_lines(hier._meta, hier._tags, hier._stamps, hier._rr, hier._rng, hier._lat,
                                   core, lines, strategy.N, strategy.A, strategy.D))


def _seed_for(seed: int, s: EvictionStrategy) -> int:
    ss = np.random.SeedSequence([seed, s.N, s.A, s.D])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def evaluate(strategy: EvictionStrategy, profile: DeviceProfile, trials: int, seed: int = 0,
             core: int = 0, target: int = 0x40000) -> EvalResult:
    """Mean loop cycles and eviction rate of ``strategy`` on ``profile``.

    Each trial starts from the target's sets filled with unrelated congruent
    lines, loads the target on ``core``, runs the loop and checks residency
    with the simulator's oracle.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    hier = Hierarchy(profile, _seed_for(seed, strategy))
    geo = profile.l2_geometry(core)
    members = congruent_addresses(geo, target, strategy.N)
    lines = hier._lines(members)
    shift = hier.line_shift
    stride = (geo.sets * geo.line_size) >> shift
    junk_base = -(-hier._n_lines // stride) * stride * 2
    evicted, cycles = K.eviction_trials(hier._meta, hier._tags, hier._stamps, hier._rr, hier._rng, hier._lat,
                                        core, target >> shift, lines, stride,
                                        strategy.N, strategy.A, strategy.D, trials, junk_base)
    return EvalResult(cycles / trials, evicted / trials, trials)


def parse_range(text: str) -> range:
    """'16..24' or '3' -> inclusive range."""
    if ".." in text:
        lo, hi = text.split("..")
        return range(int(lo), int(hi) + 1)
    return range(int(text), int(text) + 1)


def parse_grid(text: str) -> dict[str, range]:
    """'N=16..24,A=1..4,D=1..6' -> {'N': range, ...}."""
    grid = {}
    for part in text.split(","):
        key, _, val = part.partition("=")
        key = key.strip().upper()
        if key not in ("N", "A", "D"):
            raise ValueError(f"unknown grid axis {key!r}")
        grid[key] = parse_range(val.strip())
    missing = {"N", "A", "D"} - set(grid)
    if missing:
        raise ValueError(f"grid lacks {sorted(missing)}")
    return grid


def grid_strategies(grid: dict[str, range]) -> list[EvictionStrategy]:
    out = []
    for n, a, d in itertools.product(grid["N"], grid["A"], grid["D"]):
        if 1 <= d <= n and 1 <= a <= n:
            out.append(EvictionStrategy(n, a, d))
    return out


def rank(results) -> list[tuple[EvictionStrategy, EvalResult]]:
    return sorted(results, key=lambda sr: (-sr[1].eviction_rate, sr[1].avg_cycles, sr[0]))


def search(grid, profile: DeviceProfile, trials: int, seed: int = 0,
           core: int = 0) -> list[tuple[EvictionStrategy, EvalResult]]:
    """Evaluate every grid point; best (highest rate, then fastest) first."""
    strategies = grid if isinstance(grid, list) else grid_strategies(grid)
    if not strategies:
        raise ValueError("empty strategy grid")
    return rank([(s, evaluate(s, profile, trials, seed, core)) for s in strategies])
