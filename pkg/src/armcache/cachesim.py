"""Multi-core, multi-cluster cache hierarchy with cycle-annotated accesses.

Device profiles are JSON documents (``schema_version`` 1).  The shipped ones
live in ``armcache/profiles``::

    {
      "schema_version": 1,
      "name": "alcatel-pop2",
      "line_size": 64,
      "flush_available": false,
      "coherent_across_clusters": true,
      "latency": {"l1_hit": 4, ..., "jitter": {"l1_hit": 1, ...}},
      "clusters": [
        {"cores": 4,
         "l1i": {"size": 32768, "ways": 4, "sets": 128, "policy": "lru"},
         "l1d": {...}, "l2": {..., "policy": "random"},
         "inclusion": {"instruction": "inclusive", "data": "victim"}}
      ]
    }

``l1i``/``l1d`` may be null, which yields an L2-only toy hierarchy.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import _kernels as K

SCHEMA_VERSION = 1


class UnsupportedOperation(Exception):
    """The device lacks the requested instruction (e.g. an unprivileged flush)."""


class AddressFault(Exception):
    pass


class Level(Enum):
    L1 = K.L1
    L2 = K.L2
    REMOTE = K.REMOTE
    DRAM = K.DRAM


class Kind(Enum):
    INSTRUCTION = K.INSTR
    DATA = K.DATA

    @classmethod
    def coerce(cls, kind: "Kind | str") -> "Kind":
        if isinstance(kind, Kind):
            return kind
        return {"instruction": cls.INSTRUCTION, "instr": cls.INSTRUCTION, "i": cls.INSTRUCTION,
                "data": cls.DATA, "d": cls.DATA}[kind.lower()]


_POLICIES = {"lru": K.LRU, "random": K.RANDOM, "pseudorandom": K.RANDOM,
             "round_robin": K.ROUND_ROBIN, "roundrobin": K.ROUND_ROBIN}
_MODES = {"inclusive": K.INCLUSIVE, "victim": K.VICTIM, "non-inclusive": K.VICTIM,
          "non-inclusive-victim": K.VICTIM}


def _is_pow2(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


@dataclass(frozen=True)
class CacheGeometry:
    line_size: int
    sets: int
    ways: int
    policy: str = "random"

    def __post_init__(self):
        if not (_is_pow2(self.line_size) and _is_pow2(self.sets)) or self.ways < 1:
            raise ValueError(f"invalid geometry {self}")
        if self.policy.lower() not in _POLICIES:
            raise ValueError(f"unknown replacement policy {self.policy!r}")

    @property
    def capacity(self) -> int:
        return self.line_size * self.sets * self.ways

    @property
    def offset_bits(self) -> int:
        return self.line_size.bit_length() - 1


def set_index(geometry: CacheGeometry, paddr: int) -> int:
    return (paddr >> geometry.offset_bits) & (geometry.sets - 1)


@dataclass(frozen=True)
class LatencyModel:
    l1_hit: int = 4
    l2_hit: int = 16
    remote_hit: int = 40
    dram: int = 520
    flush_cached: int = 160
    flush_uncached: int = 110
    jitter: dict = field(default_factory=lambda: {
        "l1_hit": 1.0, "l2_hit": 2.0, "remote_hit": 4.0, "dram": 24.0,
        "flush_cached": 4.0, "flush_uncached": 4.0})

    CLASSES = ("l1_hit", "l2_hit", "remote_hit", "dram", "flush_cached", "flush_uncached")

    def __post_init__(self):
        if not (0 < self.l1_hit < self.remote_hit < self.dram):
            raise ValueError("latencies must satisfy 0 < l1_hit < remote_hit < dram")
        if not (0 < self.flush_uncached < self.flush_cached):
            raise ValueError("flush of a cached line must be slower than of an uncached one")
        if any(self.jitter.get(c, 0.0) < 0 for c in self.CLASSES):
            raise ValueError("jitter must be non-negative")

    def as_array(self) -> np.ndarray:
        bases = [getattr(self, c) for c in self.CLASSES]
        spreads = [float(self.jitter.get(c, 0.0)) for c in self.CLASSES]
        return np.array(bases + spreads, dtype=np.float64)

    def mean(self, cls: str) -> float:
        return getattr(self, cls) + float(self.jitter.get(cls, 0.0))


@dataclass(frozen=True)
class ClusterSpec:
    cores: int
    l1i: CacheGeometry | None
    l1d: CacheGeometry | None
    l2: CacheGeometry | None
    inclusion_instruction: str = "inclusive"
    inclusion_data: str = "inclusive"
    name: str = ""


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    clusters: tuple[ClusterSpec, ...]
    latency: LatencyModel = LatencyModel()
    flush_available: bool = False
    coherent_across_clusters: bool = True
    line_size: int = 64
    page_size: int = 4096
    physical_memory: int = 1 << 30
    pagemap_restricted: bool = False

    def __post_init__(self):
        if not self.clusters:
            raise ValueError("a device needs at least one cluster")
        if self.physical_memory % self.page_size:
            raise ValueError("physical memory must be a multiple of the page size")

    @property
    def n_cores(self) -> int:
        return sum(c.cores for c in self.clusters)

    def cores_of(self, cluster: int) -> range:
        start = sum(c.cores for c in self.clusters[:cluster])
        return range(start, start + self.clusters[cluster].cores)

    def cluster_of(self, core: int) -> int:
        for i in range(len(self.clusters)):
            if core in self.cores_of(i):
                return i
        raise ValueError(f"no core {core} on {self.name}")

    def l2_geometry(self, core: int = 0) -> CacheGeometry:
        return self.clusters[self.cluster_of(core)].l2

    def with_(self, **changes) -> "DeviceProfile":
        return replace(self, **changes)


def _geometry(d: dict | None, line_size: int) -> CacheGeometry | None:
    if d is None:
        return None
    geo = CacheGeometry(d.get("line_size", line_size), d["sets"], d["ways"], d.get("policy", "random"))
    if "size" in d and geo.capacity != d["size"]:
        raise ValueError(f"stated size {d['size']} does not match geometry {geo}")
    return geo


def profile_from_dict(d: dict) -> DeviceProfile:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported profile schema_version {d.get('schema_version')!r}")
    ls = d.get("line_size", 64)
    clusters = []
    for c in d["clusters"]:
        inc = c.get("inclusion", {})
        clusters.append(ClusterSpec(
            cores=c["cores"],
            l1i=_geometry(c.get("l1i"), ls),
            l1d=_geometry(c.get("l1d"), ls),
            l2=_geometry(c.get("l2"), ls),
            inclusion_instruction=inc.get("instruction", "inclusive"),
            inclusion_data=inc.get("data", "inclusive"),
            name=c.get("name", ""),
        ))
    lat = d.get("latency", {})
    latency = LatencyModel(**{k: v for k, v in lat.items()}) if lat else LatencyModel()
    if lat and "jitter" in lat:
        jit = dict(LatencyModel().jitter)
        jit.update(lat["jitter"])
        latency = replace(latency, jitter=jit)
    return DeviceProfile(
        name=d["name"],
        clusters=tuple(clusters),
        latency=latency,
        flush_available=d.get("flush_available", False),
        coherent_across_clusters=d.get("coherent_across_clusters", True),
        line_size=ls,
        page_size=d.get("page_size", 4096),
        physical_memory=d.get("physical_memory", 1 << 30),
        pagemap_restricted=d.get("pagemap_restricted", False),
    )


SHIPPED_PROFILES = ("oneplus-one", "alcatel-pop2", "galaxy-s6")


def load_profile(name_or_path: str | Path) -> DeviceProfile:
    """Load a shipped profile by name, or any profile file by path."""
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        text = p.read_text()
    else:
        text = resources.files("armcache.profiles").joinpath(f"{name_or_path}.json").read_text()
    return profile_from_dict(json.loads(text))


def toy_profile(ways: int = 16, sets: int = 1, policy: str = "random", l1: CacheGeometry | None = None,
                latency: LatencyModel | None = None) -> DeviceProfile:
    """Single-core device with a lone L2 (and optional L1D), for isolated tests."""
    l2 = CacheGeometry(64, sets, ways, policy)
    return DeviceProfile(
        name=f"toy-{ways}w-{sets}s-{policy}",
        clusters=(ClusterSpec(1, None, l1, l2, "inclusive", "inclusive"),),
        latency=latency or LatencyModel(),
        physical_memory=1 << 26,
    )


class AccessOutcome(NamedTuple):
    serviced_by: Level
    cycles: int
    set_index_l2: int


class Hierarchy:
    """The simulated caches of one device.

    Cores are numbered consecutively across clusters.  Every replacement
    decision and jitter draw comes from one seeded generator, so a fixed seed
    and access script reproduce the exact outcome sequence.
    """

    def __init__(self, profile: DeviceProfile, seed: int = 0):
        self.profile = profile
        self.line_shift = profile.line_size.bit_length() - 1
        caches: list[tuple[str, int, CacheGeometry]] = []
        core_rows, cluster_rows = [], []
        for ci, cl in enumerate(profile.clusters):
            l2 = -1
            if cl.l2 is not None:
                l2 = len(caches)
                caches.append(("L2", ci, cl.l2))
            cluster_rows.append((l2, _MODES[cl.inclusion_instruction], _MODES[cl.inclusion_data]))
            for core in profile.cores_of(ci):
                l1i = l1d = -1
                if cl.l1i is not None:
                    l1i = len(caches)
                    caches.append(("L1I", core, cl.l1i))
                if cl.l1d is not None:
                    l1d = len(caches)
                    caches.append(("L1D", core, cl.l1d))
                core_rows.append((l1i, l1d, ci))
        self._cache_ids = {(kind, owner): i for i, (kind, owner, _) in enumerate(caches)}
        self._geometries = [g for _, _, g in caches]

        nc = len(caches)
        meta = [nc, profile.n_cores, len(profile.clusters), int(profile.coherent_across_clusters),
                0, self.line_shift, 0, 0]
        tag_off = rr_off = 0
        for g in self._geometries:
            if g.line_size < profile.line_size:
                raise ValueError("cache lines cannot be smaller than the device line size")
            shift = (g.line_size // profile.line_size).bit_length() - 1
            meta += [g.sets, g.ways, _POLICIES[g.policy.lower()], tag_off, rr_off, shift]
            tag_off += g.sets * g.ways
            rr_off += g.sets
        meta[6] = len(meta)
        for row in core_rows:
            meta += list(row)
        meta[7] = len(meta)
        for row in cluster_rows:
            meta += list(row)
        self._meta = np.array(meta, dtype=np.int64)
        self._tags = np.full(tag_off, -1, dtype=np.int64)
        self._stamps = np.zeros(tag_off, dtype=np.int64)
        self._rr = np.zeros(max(rr_off, 1), dtype=np.int64)
        self._rng = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64)
        self._lat = profile.latency.as_array()
        self._n_lines = profile.physical_memory >> self.line_shift

    # -- helpers ---------------------------------------------------------
    def _line(self, paddr: int) -> int:
        line = paddr >> self.line_shift
        if not 0 <= paddr < self.profile.physical_memory:
            raise AddressFault(f"physical address {paddr:#x} outside memory")
        return line

    def _lines(self, paddrs) -> np.ndarray:
        a = np.asarray(paddrs, dtype=np.int64)
        if a.size and (a.min() < 0 or a.max() >= self.profile.physical_memory):
            raise AddressFault("physical address outside memory")
        return a >> self.line_shift

    def _check_core(self, core: int):
        if not 0 <= core < self.profile.n_cores:
            raise ValueError(f"no core {core} on {self.profile.name}")

    def l2_set(self, paddr: int, core: int = 0) -> int:
        return set_index(self.profile.l2_geometry(core), paddr)

    # -- the operations ----------------------------------------------------
    def access(self, core: int, paddr: int, kind: Kind | str = Kind.DATA) -> AccessOutcome:
        self._check_core(core)
        line = self._line(paddr)
        k = Kind.coerce(kind).value
        lv = K.access_one(self._meta, self._tags, self._stamps, self._rr, self._rng, core, line, k)
        cycles = int(K.draw_latency(self._lat, self._rng, lv))
        return AccessOutcome(Level(lv), cycles, self.l2_set(paddr, core))

    def access_many(self, core: int, paddrs, kind: Kind | str = Kind.DATA) -> tuple[np.ndarray, np.ndarray]:
        """Sequential accesses; returns (levels, cycles) arrays."""
        self._check_core(core)
        lines = self._lines(paddrs)
        levels = np.empty(lines.size, dtype=np.int64)
        cycles = np.empty(lines.size, dtype=np.int64)
        K.access_batch(self._meta, self._tags, self._stamps, self._rr, self._rng, self._lat,
                       core, lines, Kind.coerce(kind).value, levels, cycles)
        return levels, cycles

    def touch_many(self, core: int, paddrs, kind: Kind | str = Kind.DATA) -> None:
        """Like access_many, without latency draws."""
        self._check_core(core)
        K.touch_batch(self._meta, self._tags, self._stamps, self._rr, self._rng,
                      core, self._lines(paddrs), Kind.coerce(kind).value)

    def flush(self, core: int, paddr: int) -> int:
        if not self.profile.flush_available:
            raise UnsupportedOperation(f"{self.profile.name} has no unprivileged flush")
        self._check_core(core)
        cycles, _ = K.flush_one(self._meta, self._tags, self._stamps, self._rng, self._lat, self._line(paddr))
        return int(cycles)

    def flush_many(self, core: int, paddrs) -> np.ndarray:
        if not self.profile.flush_available:
            raise UnsupportedOperation(f"{self.profile.name} has no unprivileged flush")
        lines = self._lines(paddrs)
        cycles = np.empty(lines.size, dtype=np.int64)
        K.flush_batch(self._meta, self._tags, self._stamps, self._rng, self._lat, lines, cycles)
        return cycles

    def invalidate(self, paddr: int) -> bool:
        """Privileged removal of a line from every cache (no timing, no flush check)."""
        line = self._line(paddr)
        hit = False
        for c in range(len(self._geometries)):
            hit |= bool(K.remove(self._meta, self._tags, self._stamps, c, line))
        return hit

    def flush_all(self) -> None:
        """Privileged clean of every cache, as done on secure-world transitions."""
        self._tags.fill(-1)
        self._stamps.fill(0)

    def scrub_l1(self, core: int) -> None:
        """Drain a core's L1s as unrelated work on that core would."""
        K.scrub_l1(self._meta, self._tags, self._stamps, self._rr, self._rng, core)

    # -- oracles (tests and evaluation only) ------------------------------
    def _cache_id(self, level: str, owner: int) -> int:
        level = level.upper()
        if level == "L2":
            owner = self.profile.cluster_of(owner) if owner >= 0 else 0
        key = (level, owner)
        if key not in self._cache_ids:
            raise KeyError(f"no {level} cache for {owner}")
        return self._cache_ids[key]

    def occupancy_snapshot(self, level: str, set_number: int, core: int = 0) -> list[int]:
        """Resident line addresses of one set.

        ``level`` is "L1I", "L1D" (owned by ``core``) or "L2" (the cluster of ``core``).
        """
        c = self._cache_id(level, core)
        g = self._geometries[c]
        base = self._meta[K.CACHE_TABLE + K.CACHE_FIELDS * c + 3] + set_number * g.ways
        tags = self._tags[base:base + g.ways]
        return sorted(int(t) << g.offset_bits for t in tags if t >= 0)

    def is_cached(self, paddr: int) -> bool:
        return bool(K.present_anywhere(self._meta, self._tags, self._line(paddr)))

    def cached_in(self, level: str, paddr: int, core: int = 0) -> bool:
        c = self._cache_id(level, core)
        return K.lookup(self._meta, self._tags, c, self._line(paddr)) >= 0

    @property
    def rng_state(self) -> int:
        return int(self._rng[0])
