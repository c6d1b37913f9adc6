"""Cache attack primitives: Flush+Reload, Evict+Reload, Prime+Probe, Flush+Flush.

Each primitive exists in a single-target form matching its textbook
definition and a batched "prober" form that measures many targets per
kernel call, which is what the monitoring loops use.  Probers return
observed timer ticks, never simulator levels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .cachesim import DeviceProfile, Hierarchy, Kind, UnsupportedOperation, set_index
from .eviction import EvictionSet, EvictionStrategy, NoPhysicalOracle, PoolExhausted
from .memspace import PagemapDenied, ProcessSpace
from .timing import Threshold, TimerModel, calibrate
from .victims import Scheduler

HIT, MISS = "hit", "miss"


@dataclass
class ProbeTarget:
    proc: ProcessSpace
    vaddr: int
    evset: EvictionSet | None = None
    name: str = ""

    @property
    def paddr(self) -> int:
        # the attacker's own access, not a pagemap lookup
        return self.proc.translate(self.vaddr)


@dataclass
class MonitorTrace:
    target_id: int
    timestamps: list[int] = field(default_factory=list)
    ticks: list[int] = field(default_factory=list)
    hits: list[bool] = field(default_factory=list)

    def append(self, t: int, ticks: int, hit: bool) -> None:
        if self.timestamps and t <= self.timestamps[-1]:
            raise ValueError("trace timestamps must increase")
        self.timestamps.append(int(t))
        self.ticks.append(int(ticks))
        self.hits.append(bool(hit))

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def classes(self) -> list[str]:
        return [HIT if h else MISS for h in self.hits]

    def hit_times(self) -> np.ndarray:
        return np.asarray(self.timestamps, dtype=np.int64)[np.asarray(self.hits, dtype=bool)]


def _require_flush(hier: Hierarchy):
    if not hier.profile.flush_available:
        raise UnsupportedOperation(f"{hier.profile.name} has no unprivileged flush")


# -- batched probers --------------------------------------------------------

class Prober:
    """One measurement round over a fixed list of targets."""

    def __init__(self, hier: Hierarchy, core: int, timer: TimerModel, rng: np.random.Generator):
        self.hier, self.core, self.timer, self.rng = hier, core, timer, rng

    def round(self) -> tuple[np.ndarray, np.ndarray, int]:
        """Returns (ticks, hit flags, cycles consumed)."""
        raise NotImplementedError

    def __len__(self) -> int:
        raise NotImplementedError


class FlushReloadProber(Prober):
    def __init__(self, hier, core, paddrs, timer, threshold: Threshold, rng, kind=Kind.DATA):
        super().__init__(hier, core, timer, rng)
        _require_flush(hier)
        self.lines = hier._lines(paddrs)
        self.threshold = threshold
        self.kind = Kind.coerce(kind).value
        self._lv = np.empty(self.lines.size, dtype=np.int64)
        self._cy = np.empty(self.lines.size, dtype=np.int64)

    def __len__(self):
        return self.lines.size

    def reset(self) -> None:
        self.hier.flush_many(self.core, self.lines << self.hier.line_shift)

    def round(self):
        h = self.hier
        cost = K.reload_flush_batch(h._meta, h._tags, h._stamps, h._rr, h._rng, h._lat, self.core,
                                    self.lines, self.kind, self._lv, self._cy)
        ticks = self.timer.observe(self._cy, self.rng)
        return ticks, ticks < self.threshold.value, int(cost)


class EvictReloadProber(Prober):
    def __init__(self, hier, core, paddrs, evsets: list[EvictionSet], strategy: EvictionStrategy,
                 timer, threshold: Threshold, rng, kind=Kind.DATA):
        super().__init__(hier, core, timer, rng)
        if len(evsets) != len(paddrs) or any(e is None for e in evsets):
            raise ValueError("Evict+Reload needs an eviction set per target")
        if any(len(e) < strategy.N for e in evsets):
            raise ValueError(f"eviction sets need at least {strategy.N} members")
        self.lines = hier._lines(paddrs)
        self.evsets = np.stack([hier._lines(e.members[:strategy.N]) for e in evsets])
        self.strategy = strategy
        self.threshold = threshold
        self.kind = Kind.coerce(kind).value
        self._lv = np.empty(self.lines.size, dtype=np.int64)
        self._cy = np.empty(self.lines.size, dtype=np.int64)

    def __len__(self):
        return self.lines.size

    def reset(self) -> None:
        h, s = self.hier, self.strategy
        for row in self.evsets:
            K.run_pattern_lines(h._meta, h._tags, h._stamps, h._rr, h._rng, h._lat, self.core,
                                row, s.N, s.A, s.D)

    def round(self):
        h, s = self.hier, self.strategy
        cost = K.reload_evict_batch(h._meta, h._tags, h._stamps, h._rr, h._rng, h._lat, self.core,
                                    self.lines, self.kind, self.evsets, s.N, s.A, s.D, self._lv, self._cy)
        ticks = self.timer.observe(self._cy, self.rng)
        return ticks, ticks < self.threshold.value, int(cost)


class FlushFlushProber(Prober):
    def __init__(self, hier, core, paddrs, timer, threshold: Threshold, rng):
        super().__init__(hier, core, timer, rng)
        _require_flush(hier)
        self.lines = hier._lines(paddrs)
        self.threshold = threshold
        self._cy = np.empty(self.lines.size, dtype=np.int64)

    def __len__(self):
        return self.lines.size

    def reset(self) -> None:
        self.hier.flush_many(self.core, self.lines << self.hier.line_shift)

    def round(self):
        h = self.hier
        cost = K.flush_batch(h._meta, h._tags, h._stamps, h._rng, h._lat, self.lines, self._cy)
        ticks = self.timer.observe(self._cy, self.rng)
        # a slow flush means the line was cached
        return ticks, ticks >= self.threshold.value, int(cost)


class PrimeProbeProber(Prober):
    """Prime+Probe over several sets; a set "hits" when its score clears its threshold."""

    def __init__(self, hier, core, primes: list[list[int]], timer, rng, kind=Kind.INSTRUCTION,
                 thresholds=None, resettle: bool = True):
        super().__init__(hier, core, timer, rng)
        self.resettle = resettle
        width = max((len(p) for p in primes), default=0)
        self.primes = np.zeros((len(primes), max(width, 1)), dtype=np.int64)
        self.counts = np.array([len(p) for p in primes], dtype=np.int64)
        for r, p in enumerate(primes):
            self.primes[r, :len(p)] = hier._lines(p)
        self.kind = Kind.coerce(kind).value
        self.thresholds = None if thresholds is None else np.asarray(thresholds, dtype=np.float64)
        self._lv = np.zeros(self.primes.shape, dtype=np.int64)
        self._cy = np.zeros(self.primes.shape, dtype=np.int64)
        self._mask = np.arange(self.primes.shape[1])[None, :] < self.counts[:, None]

    def __len__(self):
        return self.primes.shape[0]

    def reset(self, max_passes: int = 200) -> None:
        """Forward prime of every set, then probe passes until one is miss-free.

        Random replacement may place a prime line over another, so a single
        forward pass rarely occupies ``count`` distinct ways.  The settling
        passes are what an attacker does by timing; a miss costs hundreds of
        cycles and is unmistakable.
        """
        h = self.hier
        K.prime_batch(h._meta, h._tags, h._stamps, h._rr, h._rng, self.core, self.primes, self.counts, self.kind)
        self.scores()
        self.settle(max_passes)

    def scores(self) -> tuple[np.ndarray, int]:
        h = self.hier
        cost = K.probe_batch(h._meta, h._tags, h._stamps, h._rr, h._rng, h._lat, self.core,
                             self.primes, self.counts, self.kind, self._lv, self._cy)
        ticks = self.timer.observe(self._cy, self.rng)
        return np.where(self._mask, ticks, 0).sum(axis=1), int(cost)

    def calibrate(self, rounds: int = 200, sigmas: float = 3.0, between=None) -> np.ndarray:
        """Per-set threshold = quiet mean + ``sigmas`` quiet standard deviations."""
        samples = np.empty((rounds, len(self)))
        for i in range(rounds):
            if between is not None:
                between()
            samples[i], _ = self.scores()
        self.quiet_mean = samples.mean(axis=0)
        self.quiet_std = samples.std(axis=0)
        self.thresholds = self.quiet_mean + sigmas * np.maximum(self.quiet_std, 1.0)
        return self.thresholds

    def settle(self, max_passes: int = 50) -> int:
        """Unmeasured probe passes over sets whose last pass went to memory,
        until each comes back clean; returns the cycles spent."""
        h = self.hier
        dirty = np.any((self._lv == K.DRAM) & self._mask, axis=1)
        if not dirty.any():
            return 0
        return int(K.settle_batch(h._meta, h._tags, h._stamps, h._rr, h._rng, h._lat, self.core,
                                  self.primes, self.counts, self.kind, dirty, max_passes))

    def round(self):
        if self.thresholds is None:
            raise ValueError("calibrate the probe thresholds first")
        s, cost = self.scores()
        hits = s > self.thresholds
        if self.resettle:
            cost += self.settle()
        return s, hits, cost


# -- single-target primitives -------------------------------------------------

def flush_reload(hier: Hierarchy, core: int, target: ProbeTarget, timer: TimerModel,
                 threshold: Threshold, rng: np.random.Generator) -> str:
    """Reload (timed) then flush, leaving the line uncached."""
    ticks, hit, _ = FlushReloadProber(hier, core, [target.paddr], timer, threshold, rng).round()
    return HIT if hit[0] else MISS


def evict_reload(hier: Hierarchy, core: int, target: ProbeTarget, strategy: EvictionStrategy,
                 timer: TimerModel, threshold: Threshold, rng: np.random.Generator) -> str:
    if target.evset is None:
        raise ValueError("Evict+Reload needs the target's eviction set")
    p = EvictReloadProber(hier, core, [target.paddr], [target.evset], strategy, timer, threshold, rng)
    _, hit, _ = p.round()
    return HIT if hit[0] else MISS


def flush_flush(hier: Hierarchy, core: int, target: ProbeTarget, timer: TimerModel,
                threshold: Threshold, rng: np.random.Generator) -> str:
    _, hit, _ = FlushFlushProber(hier, core, [target.paddr], timer, threshold, rng).round()
    return HIT if hit[0] else MISS


def prime(hier: Hierarchy, core: int, set_number: int, prime_lines: int, pool: "CongruentPool",
          kind=Kind.INSTRUCTION) -> list[int]:
    """Access ``prime_lines`` congruent lines of ``set_number`` in forward order."""
    ways = hier.profile.l2_geometry(core).ways
    if prime_lines > ways:
        raise ValueError(f"cannot prime {prime_lines} lines into a {ways}-way set")
    lines = pool.lines_for(set_number, prime_lines)
    if lines:
        hier.touch_many(core, lines, kind)
    return lines


def probe(hier: Hierarchy, core: int, prime_list: list[int], timer: TimerModel,
          rng: np.random.Generator, kind=Kind.INSTRUCTION) -> int:
    """Backward re-access of the prime list; returns the summed ticks."""
    if not prime_list:
        return 0
    p = PrimeProbeProber(hier, core, [prime_list], timer, rng, kind)
    s, _ = p.scores()
    return int(s[0])


def evict_time(run_victim, evict, timer: TimerModel, rng: np.random.Generator) -> tuple[int, int]:
    """Evict+Time: victim runtime in ticks without and with a prior eviction.

    ``run_victim()`` returns the victim's cycles; ``evict()`` performs the eviction.
    """
    base = timer.observe(run_victim(), rng)
    evict()
    return base, timer.observe(run_victim(), rng)


# -- eviction sets and prime pools from the pagemap -----------------------------

class CongruentPool:
    """The attacker's own lines bucketed by L2 set, via its pagemap."""

    def __init__(self, proc: ProcessSpace, geometry, pages: int | None = None):
        self.proc = proc
        self.geometry = geometry
        if pages is None:
            # enough for two full sets' worth of lines everywhere, on average
            pages = max(1, 2 * geometry.ways * geometry.sets * geometry.line_size // proc.page_size)
        self.pages = pages
        self.buckets: dict[int, list[int]] = {}
        self._grow()

    def _grow(self) -> None:
        m = self.proc.map_private(self.pages * self.proc.page_size)
        g = self.geometry
        ps = self.proc.page_size
        offs = np.arange(0, ps, g.line_size, dtype=np.int64)
        for page in range(m.length // ps):
            try:
                base = self.proc.pagemap_query(m.virtual_base + page * ps)
            except PagemapDenied as e:
                raise NoPhysicalOracle("no physical oracle: " + str(e)) from e
            pas = base + offs
            for pa, st in zip(pas.tolist(), ((pas // g.line_size) % g.sets).tolist()):
                self.buckets.setdefault(st, []).append(pa)

    def lines_for(self, set_number: int, count: int) -> list[int]:
        """First ``count`` pool lines in ``set_number``, mapping more memory once if short."""
        if len(self.buckets.get(set_number, [])) < count:
            self._grow()
        have = self.buckets.get(set_number, [])
        if len(have) < count:
            raise PoolExhausted(f"set {set_number}: {len(have)} of {count} congruent lines")
        return have[:count]

    def evset_for(self, target_paddr: int, size: int) -> EvictionSet:
        s = set_index(self.geometry, target_paddr)
        return EvictionSet(target_paddr, tuple(p for p in self.lines_for(s, size + 1) if p != target_paddr)[:size])


# -- threshold calibration on a scratch copy of the device ------------------------

def latency_samples(profile: DeviceProfile, timer: TimerModel, rng: np.random.Generator,
                    attacker_core: int = 0, victim_core: int = 1, samples: int = 2000,
                    seed: int = 0) -> dict[str, np.ndarray]:
    """Labelled reload timings on a scratch copy of the device.

    ``l1_hit``: the attacker re-reads its own line; ``remote_hit``: the line
    was last touched by ``victim_core``; ``dram``: a line nobody touched.
    Returns (true cycles, observed ticks) per class.
    """
    h = Hierarchy(profile, seed)
    base = 1 << 20
    stride = profile.line_size
    out = {k: np.empty(samples, dtype=np.int64) for k in ("l1_hit", "remote_hit", "dram")}
    for i in range(samples):
        pa = base + 2 * i * stride
        _, cy = h.access_many(attacker_core, [pa, pa])
        out["dram"][i], out["l1_hit"][i] = cy
        qa = pa + stride
        h.touch_many(victim_core, [qa])
        _, cy = h.access_many(attacker_core, [qa])
        out["remote_hit"][i] = cy[0]
    return {k: (v, timer.observe(v, rng)) for k, v in out.items()}


def calibrate_reload(profile: DeviceProfile, timer: TimerModel, rng: np.random.Generator,
                     attacker_core: int = 0, victim_core: int = 1, samples: int = 2000,
                     seed: int = 0) -> Threshold:
    """Hit threshold for reloads: victim-cached lines against memory accesses."""
    s = latency_samples(profile, timer, rng, attacker_core, victim_core, samples, seed)
    return calibrate(s["remote_hit"][1], s["dram"][1])


def calibrate_flush(profile: DeviceProfile, timer: TimerModel, rng: np.random.Generator,
                    samples: int = 2000, seed: int = 0) -> Threshold:
    """Flush+Flush threshold: cached flushes are the slow class.

    Returned as a ``Threshold`` on flush ticks where values at/above mean cached.
    """
    if not profile.flush_available:
        raise UnsupportedOperation(f"{profile.name} has no unprivileged flush")
    h = Hierarchy(profile, seed)
    base = 1 << 20
    lines = base + profile.line_size * np.arange(samples)
    uncached = h.flush_many(0, lines)
    h.touch_many(1, lines)
    cached = h.flush_many(0, lines)
    # calibrate() treats the lower class as "hit"; here the lower class is uncached
    return calibrate(timer.observe(uncached, rng), timer.observe(cached, rng))


# -- loops --------------------------------------------------------------------

def monitor(prober: Prober, duration: int, scheduler: Scheduler | None = None,
            start: int | None = None) -> tuple[list[MonitorTrace], list[tuple[int, int]]]:
    """Round-robin the prober over its targets until ``duration`` cycles pass.

    Returns one trace per target and the descheduling gaps.
    """
    if len(prober) == 0:
        raise ValueError("nothing to monitor")
    sched = scheduler if scheduler is not None else Scheduler()
    traces = [MonitorTrace(i) for i in range(len(prober))]
    n = len(prober)

    def one_round(t):
        ticks, hits, cost = prober.round()
        step = max(cost // n, 1)
        for i in range(n):
            traces[i].append(t + i * step, ticks[i], hits[i])
        return max(cost, n)

    gaps = sched.drive(one_round, duration, start)
    return traces, gaps


def find_active_sets(prober: PrimeProbeProber, trigger, rounds: int, sets=None,
                     sigmas: float = 3.0) -> list[tuple[int, float]]:
    """Sets whose probe score rises when ``trigger()`` runs.

    Quiet rounds fix each set's mean and spread; a set is active when its
    mean triggered score exceeds the quiet mean by more than ``sigmas``
    quiet standard deviations.  Returns (set, margin) sorted by margin.
    """
    sets = list(range(len(prober))) if sets is None else list(sets)
    prober.reset()
    prober.scores()
    quiet = np.empty((rounds, len(prober)))
    for i in range(rounds):
        quiet[i], _ = prober.scores()
    trig = np.empty((rounds, len(prober)))
    for i in range(rounds):
        trigger()
        trig[i], _ = prober.scores()
    margin = trig.mean(axis=0) - (quiet.mean(axis=0) + sigmas * np.maximum(quiet.std(axis=0), 1.0))
    order = np.argsort(-margin, kind="stable")
    return [(sets[i], float(margin[i])) for i in order if margin[i] > 0]
