"""From traces to results: template matrices, event recognition, AES nibbles, set profiles."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import (CongruentPool, EvictReloadProber, FlushReloadProber, MonitorTrace,
                      PrimeProbeProber, calibrate_reload, find_active_sets, monitor)
from .cachesim import Hierarchy, Kind, set_index
from .eviction import EvictionStrategy, NoPhysicalOracle
from .memspace import PagemapDenied, ProcessSpace
from .timing import TimerModel
from .victims import (EventLibrary, EventVictim, Scheduler, TTableAES, Trustlet, aes_encrypt,
                      trigger_event, trustlet_invoke)


class AmbiguousTemplate(Exception):
    pass


# -- cache templates -----------------------------------------------------------

@dataclass
class TemplateMatrix:
    addresses: list[int]          # library offsets, one row each
    events: list[str]             # one column each
    hits: np.ndarray              # rows x columns
    duration: int = 0             # profiling cycles per column

    def column(self, event: str) -> np.ndarray:
        return self.hits[:, self.events.index(event)]

    def normalized(self) -> np.ndarray:
        norms = np.linalg.norm(self.hits, axis=0)
        return self.hits / np.where(norms > 0, norms, 1)

    def check_distinguishable(self, tol: float = 1e-9) -> None:
        cols = self.normalized()
        if not cols.any():
            raise AmbiguousTemplate("no event produced any hits")
        for i in range(len(self.events)):
            # an all-zero column (idle) scores zero against everything and is never chosen
            for j in range(i):
                if np.allclose(cols[:, i], cols[:, j], atol=tol):
                    raise AmbiguousTemplate(f"events {self.events[j]!r} and {self.events[i]!r} look identical")

    def rows(self):
        for r, a in enumerate(self.addresses):
            for c, e in enumerate(self.events):
                yield a, e, int(self.hits[r, c])


class TemplateBench:
    """An event victim on one core and a Flush+Reload attacker on another."""

    def __init__(self, hier: Hierarchy, lib: EventLibrary, timer: TimerModel, rng: np.random.Generator,
                 attacker_core: int = 0, victim_core: int = 1, space_seed: int = 0,
                 quantum: int = 20_000, gap_probability: float = 0.0, addresses=None):
        from .memspace import PhysicalMemory
        self.hier, self.lib, self.timer, self.rng = hier, lib, timer, rng
        mem = PhysicalMemory(hier.profile.physical_memory, hier.profile.page_size, seed=space_seed)
        self.victim = EventVictim(hier, victim_core, ProcessSpace("victim", mem), lib)
        self.attacker = ProcessSpace("attacker", mem)
        amap = self.attacker.map_shared(lib.obj, lib.size)
        self.addresses = list(range(len(lib.offsets))) if addresses is None else list(addresses)
        paddrs = [self.attacker.translate(amap.virtual_base + lib.offsets[a]) for a in self.addresses]
        sets = [hier.l2_set(p, attacker_core) for p in paddrs]
        if len(set(sets)) != len(sets):
            raise ValueError("monitored addresses share an L2 set")
        thr = calibrate_reload(hier.profile, timer, rng, attacker_core, victim_core, samples=1000)
        self.prober = FlushReloadProber(hier, attacker_core, paddrs, timer, thr, rng)
        self.prober.reset()
        self.sched = Scheduler(quantum, gap_probability, seed=int(rng.integers(1 << 62)))
        self.sched.add(self.victim)

    def run(self, activities, duration: int):
        """Schedule ``activities`` and monitor for ``duration`` cycles from now."""
        for a in activities:
            self.victim.schedule(a)
        return monitor(self.prober, duration, self.sched)


def profile(bench: TemplateBench, events, duration: int, spacing: int = 600_000) -> TemplateMatrix:
    """Hit counts per (address, event): each event is triggered every
    ``spacing`` cycles for ``duration`` cycles while every address is probed."""
    hits = np.zeros((len(bench.addresses), len(events)), dtype=np.int64)
    for c, ev in enumerate(events):
        t0 = bench.sched.now
        acts = [] if ev is None else [trigger_event(bench.lib, ev, t0 + k) for k in range(0, duration, spacing)]
        traces, _ = bench.run(acts, duration)
        hits[:, c] = [sum(tr.hits) for tr in traces]
        # let the tail drain so columns do not leak into each other
        bench.run([], spacing)
    return TemplateMatrix(list(bench.addresses), [e if e is not None else "idle" for e in events], hits, duration)


@dataclass(frozen=True)
class DetectedEvent:
    start: int
    end: int
    kind: str
    score: float


def classify_events(matrix: TemplateMatrix, traces: list[MonitorTrace], merge_gap: int = 250_000,
                    min_hits: int = 2) -> list[DetectedEvent]:
    """Group hits on all addresses into activity bursts and label each burst
    with the template column closest (cosine) to its hit vector."""
    matrix.check_distinguishable()
    cols = matrix.normalized()
    stamps, rows = [], []
    for r, tr in enumerate(traces):
        t = tr.hit_times()
        stamps.append(t)
        rows.append(np.full(t.size, r))
    if not stamps:
        return []
    t = np.concatenate(stamps)
    r = np.concatenate(rows)
    if t.size == 0:
        return []
    order = np.argsort(t, kind="stable")
    t, r = t[order], r[order]
    cuts = np.flatnonzero(np.diff(t) > merge_gap) + 1
    out = []
    for seg_t, seg_r in zip(np.split(t, cuts), np.split(r, cuts)):
        if seg_t.size < min_hits:
            continue
        v = np.bincount(seg_r, minlength=len(traces)).astype(float)
        v /= np.linalg.norm(v)
        sim = v @ cols
        best = int(np.argmax(sim))
        out.append(DetectedEvent(int(seg_t[0]), int(seg_t[-1]), matrix.events[best], float(sim[best])))
    return out


def hit_runs(trace: MonitorTrace, start: int, end: int) -> int:
    """Longest run of consecutive hit samples within [start, end)."""
    ts = np.asarray(trace.timestamps)
    hs = np.asarray(trace.hits, dtype=bool)[(ts >= start) & (ts < end)]
    best = cur = 0
    for h in hs:
        cur = cur + 1 if h else 0
        best = max(best, cur)
    return best


# -- AES first-round attack --------------------------------------------------------

@dataclass(frozen=True)
class KeyNibbleEstimate:
    byte_index: int
    nibble: int | None            # None when the margin stayed below the floor
    margin: float


@dataclass
class MonitoredLine:
    table: int
    line: int                    # memory line index counted from the table region's first line
    coverage: np.ndarray         # entries covered per upper-nibble class (16 counts)


def line_coverage(disalignment: int, table: int, line: int, line_size: int = 64) -> np.ndarray:
    """Entries of ``table`` per upper-nibble class lying in memory line ``line``."""
    cov = np.zeros(16, dtype=np.int64)
    x = np.arange(256)
    off = disalignment + 1024 * table + 4 * x
    inside = (off >= line * line_size) & (off < (line + 1) * line_size)
    np.add.at(cov, x[inside] >> 4, 1)
    return cov


def monitored_lines(disalignment: int, per_table: int = 2) -> list[MonitoredLine]:
    """Lines 1.. of each table (line 0 may straddle the previous table)."""
    out = []
    for t in range(4):
        for k in range(per_table):
            j = 16 * t + 1 + k
            out.append(MonitoredLine(t, j, line_coverage(disalignment, t, j)))
    return out


def decide_nibbles(plaintexts: np.ndarray, hits: np.ndarray, lines: list[MonitoredLine],
                   floor: float = 0.01) -> list[KeyNibbleEstimate]:
    """Upper key nibbles from first-round hit statistics.

    For byte i, hit rates of each monitored line of table i mod 4 are
    averaged per upper-nibble class of p_i.  A candidate nibble u predicts
    those class means to follow the line's coverage of classes q xor u; the
    candidate with the best match wins.  The margin is the gap to the
    runner-up in hit-rate units (for an aligned single line, exactly the
    best-minus-second class mean).
    """
    plaintexts = np.asarray(plaintexts, dtype=np.uint8)
    hits = np.asarray(hits, dtype=np.float64)
    q = np.arange(16)
    out = []
    for i in range(16):
        cls = plaintexts[:, i] >> 4
        counts = np.bincount(cls, minlength=16).astype(float)
        scores = np.zeros(16)
        norm = 0.0
        for m, ml in enumerate(lines):
            if ml.table != i % 4:
                continue
            rate = np.bincount(cls, weights=hits[:, m], minlength=16) / np.maximum(counts, 1)
            for u in range(16):
                scores[u] += rate @ ml.coverage[q ^ u]
            norm += float(ml.coverage @ ml.coverage)
        order = np.argsort(-scores, kind="stable")
        margin = (scores[order[0]] - scores[order[1]]) * 16 / norm if norm else 0.0
        nib = int(order[0]) if margin >= floor else None
        out.append(KeyNibbleEstimate(i, nib, float(margin)))
    return out


class AESAttack:
    """A T-table victim on one core and an attacker watching one or two lines per table."""

    def __init__(self, hier: Hierarchy, victim: TTableAES, attacker: ProcessSpace, primitive: str,
                 timer: TimerModel, rng: np.random.Generator, attacker_core: int = 0,
                 strategy: EvictionStrategy = EvictionStrategy(21, 1, 6), lines_per_table: int = 2,
                 locate_rounds: int = 24):
        self.hier, self.victim, self.attacker, self.rng = hier, victim, attacker, rng
        self.primitive = primitive
        self.lines = monitored_lines(victim.disalignment, lines_per_table)
        geo = hier.profile.l2_geometry(attacker_core)
        line_size = hier.profile.line_size
        region = victim.table_vaddr - victim.disalignment
        pool = CongruentPool(attacker, geo)
        if primitive in ("er", "fr"):
            if victim.mode != "shared":
                raise ValueError("reload attacks need the tables in shared memory")
            amap = attacker.map_shared(victim.mapping.shared_object, victim.mapping.length)
            vbase = amap.virtual_base + (region - victim.mapping.virtual_base)
            paddrs = [attacker.translate(vbase + ml.line * line_size) for ml in self.lines]
            thr = calibrate_reload(hier.profile, timer, rng, attacker_core, victim.core, samples=1000)
            if primitive == "fr":
                self.prober = FlushReloadProber(hier, attacker_core, paddrs, timer, thr, rng)
            else:
                try:
                    phys = [attacker.pagemap_query(vbase + ml.line * line_size) for ml in self.lines]
                except PagemapDenied as e:
                    raise NoPhysicalOracle("no physical oracle: " + str(e)) from e
                evsets = [pool.evset_for(p, strategy.N) for p in phys]
                self.prober = EvictReloadProber(hier, attacker_core, paddrs, evsets, strategy, timer, thr, rng)
            self.prober.reset()
        elif primitive == "pp":
            self.prober = self._locate_and_prime(pool, geo, region, attacker_core, timer, locate_rounds)
        else:
            raise ValueError(f"unknown primitive {primitive!r}")

    def _locate_and_prime(self, pool, geo, region, core, timer, rounds) -> PrimeProbeProber:
        """Find the victim's active sets, then prime the ones matching the monitored lines.

        The attacker knows where in a page the tables start, so a monitored
        line's page offset fixes the low set-index bits; the active-set scan
        supplies the rest.
        """
        ways = geo.ways
        all_sets = list(range(geo.sets))
        scan = PrimeProbeProber(self.hier, core, [pool.lines_for(s, ways - 1) for s in all_sets],
                                timer, self.rng)
        pt = lambda: aes_encrypt(self.victim, self.rng.integers(0, 256, 16, dtype=np.uint8).tobytes())
        active = dict(find_active_sets(scan, pt, rounds))
        low_span = self.hier.profile.page_size // geo.line_size
        chosen = []
        for ml in self.lines:
            low = ((region + ml.line * geo.line_size) % self.hier.profile.page_size) // geo.line_size
            cands = [s for s in all_sets if s % low_span == low % low_span and s in active]
            if not cands:
                raise RuntimeError(f"no active set found for table {ml.table} line {ml.line}")
            chosen.append(max(cands, key=lambda s: active[s]))
        self.located_sets = chosen
        p = PrimeProbeProber(self.hier, core, [pool.lines_for(s, ways - 1) for s in chosen], timer, self.rng)
        p.reset()
        p.calibrate(200)
        return p

    def collect(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """``n`` random-plaintext encryptions; returns (plaintexts, hit matrix)."""
        pts = self.rng.integers(0, 256, size=(n, 16), dtype=np.uint8)
        hits = np.zeros((n, len(self.lines)), dtype=bool)
        for e in range(n):
            aes_encrypt(self.victim, pts[e].tobytes())
            _, h, _ = self.prober.round()
            hits[e] = h
        return pts, hits


def aes_recover_upper_nibbles(attack: AESAttack, budget: int, floor: float = 0.01) -> list[KeyNibbleEstimate]:
    """Spend ``budget`` encryptions per key byte (16 x budget in total).

    Every encryption uses a fresh random plaintext, so each one informs all
    sixteen bytes at once.
    """
    pts, hits = attack.collect(16 * budget)
    return decide_nibbles(pts, hits, attack.lines, floor)


@dataclass(frozen=True)
class DisalignmentReport:
    offset: int
    boundary_splits: list[tuple[int, int]]     # per monitored line: entries of its two classes
    candidates_per_line: int


def disalignment_report(victim: TTableAES | int, line_size: int = 64) -> DisalignmentReport:
    """How a table offset splits each cache line's 16 entries between nibble classes."""
    d = victim if isinstance(victim, int) else victim.disalignment
    splits = []
    for j in range(1, 16):
        cov = line_coverage(d, 0, j, line_size)
        nz = sorted((int(c) for c in cov if c), reverse=True)
        splits.append((nz[0], nz[1] if len(nz) > 1 else 0))
    return DisalignmentReport(d, splits, splits[0][0])


# -- per-set profiles of a secure-world victim ------------------------------------------

@dataclass
class SetProfile:
    means: np.ndarray            # mean probe score per L2 set

    def __len__(self):
        return self.means.size


@dataclass
class MSEResult:
    per_set: np.ndarray
    total: float

    def fraction_in(self, lo: int, hi: int) -> float:
        s = self.per_set.sum()
        return float(self.per_set[lo:hi + 1].sum() / s) if s > 0 else 0.0


def mse_profile(a: SetProfile, b: SetProfile) -> MSEResult:
    if len(a) != len(b):
        raise ValueError(f"profile lengths differ: {len(a)} vs {len(b)}")
    d = (np.asarray(a.means, dtype=float) - np.asarray(b.means, dtype=float)) ** 2
    return MSEResult(d, float(d.mean()))


class TrustletSpy:
    """Prime+Probe over every L2 set around trustlet calls."""

    def __init__(self, trustlet: Trustlet, attacker: ProcessSpace, timer: TimerModel,
                 rng: np.random.Generator, core: int = 0):
        self.t = trustlet
        h = trustlet.hier
        geo = h.profile.l2_geometry(core)
        pool = CongruentPool(attacker, geo)
        self.prober = PrimeProbeProber(h, core, [pool.lines_for(s, geo.ways - 1) for s in range(geo.sets)],
                                       timer, rng)
        self.prober.reset()

    def invocation(self, key_valid: bool) -> np.ndarray:
        """Per-set probe score for one call.

        Without cache flushing the attacker probes once after the call.  With
        flushing on world switches it re-primes right after entry and probes
        in parallel after every body chunk, averaging those passes.
        """
        p = self.prober
        if not self.t.flush_on_enter:
            trustlet_invoke(self.t, key_valid)
            s, _ = p.scores()
            p.settle()
            return s
        passes = []
        # the exit flush wipes the primes, so the last probe needs no settling
        last = 1 + (self.t.loops if key_valid else 0)

        def chunk(prime: bool = False):
            if prime:
                p.reset()
            else:
                s, _ = p.scores()
                passes.append(s)
                if len(passes) < last:
                    p.settle()

        trustlet_invoke(self.t, key_valid, on_chunk=chunk)
        return np.mean(passes, axis=0)

    def set_profile(self, key_valid: bool, invocations: int) -> SetProfile:
        return SetProfile(np.mean([self.invocation(key_valid) for _ in range(invocations)], axis=0))
