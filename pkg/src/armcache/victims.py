"""Simulated victims and the agent scheduler.

Victims are background agents: they own a queue of timestamped memory
accesses and execute everything due whenever the scheduler advances the
clock.  The attacker is the foreground loop that drives the clock.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .cachesim import Hierarchy, Kind
from .memspace import ProcessSpace


# -- scheduling -------------------------------------------------------------

class Scheduler:
    """Fixed-quantum interleaving of one foreground loop with background agents.

    Time advances in quanta.  In each quantum the foreground loop is either
    runnable or descheduled (probability ``gap_probability``); background
    agents run on their own cores and are never descheduled.  Gap decisions
    are drawn once per quantum index from the scheduler's own generator.
    """

    def __init__(self, quantum: int = 20_000, gap_probability: float = 0.0, seed: int = 0):
        if quantum < 1 or not 0.0 <= gap_probability < 1.0:
            raise ValueError("quantum must be positive and gap_probability in [0, 1)")
        self.quantum = quantum
        self.gap_probability = gap_probability
        self._rng = np.random.default_rng(seed)
        self._gaps: list[bool] = []
        self.agents: list = []
        self.now = 0

    def add(self, agent) -> None:
        self.agents.append(agent)

    def descheduled(self, q: int) -> bool:
        while len(self._gaps) <= q:
            self._gaps.append(bool(self._rng.random() < self.gap_probability))
        return self._gaps[q]

    def advance(self, t: int) -> None:
        """Let every background agent execute its work due before ``t``."""
        for a in self.agents:
            a.advance(t)
        self.now = max(self.now, t)

    def drive(self, round_fn, duration: int, start: int | None = None) -> list[tuple[int, int]]:
        """Run ``round_fn(t) -> cycles`` repeatedly until ``duration`` has elapsed.

        Returns the descheduling gaps as (start, end) pairs.
        """
        t = self.now if start is None else start
        end = t + duration
        gaps = []
        while t < end:
            q = t // self.quantum
            q_end = min((q + 1) * self.quantum, end)
            if self.descheduled(q):
                if gaps and gaps[-1][1] == t:
                    gaps[-1] = (gaps[-1][0], q_end)
                else:
                    gaps.append((t, q_end))
                t = q_end
                continue
            while t < q_end:
                self.advance(t)
                cost = int(round_fn(t))
                if cost <= 0:
                    raise ValueError("a round must consume time")
                t += cost
        self.advance(end)
        self.now = max(self.now, t)
        return gaps


class AccessQueue:
    """A background agent replaying timestamped accesses on one core."""

    def __init__(self, hier: Hierarchy, core: int, kind: Kind | str = Kind.INSTRUCTION):
        self.hier = hier
        self.core = core
        self.kind = Kind.coerce(kind)
        self._times = np.empty(0, dtype=np.int64)
        self._addrs = np.empty(0, dtype=np.int64)
        self._next = 0
        self.executed = 0

    def enqueue(self, times, paddrs) -> None:
        times = np.asarray(times, dtype=np.int64)
        paddrs = np.asarray(paddrs, dtype=np.int64)
        pend_t = np.concatenate([self._times[self._next:], times])
        pend_a = np.concatenate([self._addrs[self._next:], paddrs])
        order = np.argsort(pend_t, kind="stable")
        self._times, self._addrs, self._next = pend_t[order], pend_a[order], 0

    @property
    def pending(self) -> int:
        return self._times.size - self._next

    def advance(self, t: int) -> None:
        stop = int(np.searchsorted(self._times, t, side="left"))
        if stop > self._next:
            self.hier.touch_many(self.core, self._addrs[self._next:stop], self.kind)
            self.executed += stop - self._next
            self._next = stop


# -- input events -------------------------------------------------------------

EVENT_KINDS = ("key", "longpress", "swipe", "tap", "text")


@dataclass(frozen=True)
class Footprint:
    addresses: tuple[int, ...]   # indices into the library's address list
    burst: int                   # accesses per address per burst
    period: int                  # cycles between bursts while the event lasts
    duration: int                # default event length in cycles


@dataclass
class EventLibrary:
    """A shared object whose code lines are touched by input events."""
    obj: str
    offsets: tuple[int, ...]
    footprints: dict[str, Footprint]
    keystroke_gap: int = 150_000
    burst_spacing: int = 300

    @classmethod
    def from_dict(cls, d: dict) -> "EventLibrary":
        n = int(d["addresses"])
        stride = int(d.get("address_stride", 4096 + 64))
        fps = {k: Footprint(tuple(v["addresses"]), int(v["burst"]), int(v["period"]), int(v["duration"]))
               for k, v in d["footprints"].items()}
        for k, fp in fps.items():
            if any(not 0 <= a < n for a in fp.addresses):
                raise ValueError(f"footprint of {k!r} references an address outside the library")
        return cls(d.get("object", "libinput.so"), tuple(i * stride for i in range(n)), fps,
                   int(d.get("keystroke_gap", 150_000)), int(d.get("burst_spacing", 300)))

    @property
    def size(self) -> int:
        return max(self.offsets) + 64

    def footprint(self, kind: str) -> Footprint:
        try:
            return self.footprints[kind]
        except KeyError:
            raise ValueError(f"unknown event kind {kind!r}") from None


@dataclass
class Activity:
    """Timed accesses produced by one triggered event (offsets into the library)."""
    kind: str
    start: int
    end: int
    times: np.ndarray
    offsets: np.ndarray


def _bursts(lib: EventLibrary, fp: Footprint, start: int, duration: int) -> tuple[np.ndarray, np.ndarray]:
    starts = np.arange(start, start + max(duration, 1), fp.period, dtype=np.int64)
    addrs = np.array([lib.offsets[a] for a in fp.addresses], dtype=np.int64)
    k = np.arange(fp.burst, dtype=np.int64)
    # burst b, repetition k, address a -> start_b + (k * |A| + a) * spacing
    step = (k[:, None] * addrs.size + np.arange(addrs.size)[None, :]) * lib.burst_spacing
    times = (starts[:, None, None] + step[None, :, :]).ravel()
    offs = np.broadcast_to(addrs, (starts.size, fp.burst, addrs.size)).ravel()
    return times, offs


def trigger_event(lib: EventLibrary, kind: str, start: int = 0, duration: int | None = None,
                  text: str | None = None) -> Activity:
    """Accesses of one event.

    ``text`` events type each character as a key burst followed by a burst
    on the text-field footprint, one character per keystroke gap.
    """
    fp = lib.footprint(kind)
    if kind == "text":
        chars = text if text is not None else "a"
        key = lib.footprint("key")
        parts_t, parts_o = [], []
        for i, _ in enumerate(chars):
            t0 = start + i * lib.keystroke_gap
            for f in (key, fp):
                t, o = _bursts(lib, f, t0, f.duration)
                parts_t.append(t)
                parts_o.append(o)
        times, offs = np.concatenate(parts_t), np.concatenate(parts_o)
    else:
        times, offs = _bursts(lib, fp, start, fp.duration if duration is None else duration)
    order = np.argsort(times, kind="stable")
    times, offs = times[order], offs[order]
    return Activity(kind, start, int(times[-1]) + 1 if times.size else start, times, offs)


class EventVictim(AccessQueue):
    """Background agent executing triggered events from a mapped library."""

    def __init__(self, hier: Hierarchy, core: int, space: ProcessSpace, lib: EventLibrary):
        super().__init__(hier, core, Kind.INSTRUCTION)
        self.lib = lib
        self.space = space
        self.mapping = space.map_shared(lib.obj, lib.size)
        self.history: list[Activity] = []

    def paddr(self, offset: int) -> int:
        return self.space.translate(self.mapping.virtual_base + offset)

    def schedule(self, activity: Activity) -> None:
        base = self.mapping.virtual_base
        paddrs = [self.space.translate(base + int(o)) for o in activity.offsets]
        self.enqueue(activity.times, paddrs)
        self.history.append(activity)


# -- AES with T-tables ------------------------------------------------------

def _xtime(a: int) -> int:
    a <<= 1
    return (a ^ 0x11B) if a & 0x100 else a


def _sbox() -> np.ndarray:
    exp, log = [0] * 255, [0] * 256
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        x ^= _xtime(x)          # multiply by the generator 3
    box = np.zeros(256, dtype=np.uint8)
    for v in range(256):
        inv = 0 if v == 0 else exp[(255 - log[v]) % 255]
        s = inv
        for r in range(1, 5):
            s ^= ((inv << r) | (inv >> (8 - r))) & 0xFF
        box[v] = s ^ 0x63
    return box


SBOX = _sbox()


def _ttables() -> np.ndarray:
    te = np.zeros((4, 256), dtype=np.uint32)
    for i in range(256):
        s = int(SBOX[i])
        s2 = _xtime(s) & 0xFF
        s3 = s2 ^ s
        w = (s2 << 24) | (s << 16) | (s << 8) | s3
        for t in range(4):
            te[t, i] = ((w >> (8 * t)) | (w << (32 - 8 * t))) & 0xFFFFFFFF
    return te


TE = _ttables()


def expand_key(key: bytes) -> np.ndarray:
    """AES-128 key schedule as 44 big-endian words."""
    if len(key) != 16:
        raise ValueError("AES-128 needs a 16-byte key")
    w = [int.from_bytes(key[4 * i:4 * i + 4], "big") for i in range(4)]
    rcon = 1
    for i in range(4, 44):
        t = w[i - 1]
        if i % 4 == 0:
            t = ((t << 8) | (t >> 24)) & 0xFFFFFFFF
            t = int.from_bytes(bytes(int(SBOX[b]) for b in t.to_bytes(4, "big")), "big")
            t ^= rcon << 24
            rcon = _xtime(rcon) & 0xFF
        w.append(w[i - 4] ^ t)
    return np.array(w, dtype=np.uint32)


@njit(cache=True)
def _aes_trace(rk, te, pt, ct, idx):
    """Encrypt one block; idx[k] = table * 256 + index of the k-th lookup."""
    s = np.zeros(4, dtype=np.uint32)
    t = np.zeros(4, dtype=np.uint32)
    for c in range(4):
        s[c] = ((np.uint32(pt[4 * c]) << 24) | (np.uint32(pt[4 * c + 1]) << 16)
                | (np.uint32(pt[4 * c + 2]) << 8) | np.uint32(pt[4 * c + 3])) ^ rk[c]
    n = 0
    for r in range(1, 11):
        for c in range(4):
            acc = np.uint32(0)
            for j in range(4):
                b = (s[(c + j) % 4] >> np.uint32(24 - 8 * j)) & np.uint32(0xFF)
                # last round: the table whose byte j is the plain S-box value
                tj = j if r < 10 else (j + 2) % 4
                idx[n] = tj * 256 + b
                n += 1
                e = te[tj, b]
                if r == 10:
                    e &= np.uint32(0xFF) << np.uint32(24 - 8 * j)
                acc ^= e
            t[c] = acc ^ rk[4 * r + c]
        for c in range(4):
            s[c] = t[c]
    for c in range(4):
        for j in range(4):
            ct[4 * c + j] = (s[c] >> np.uint32(24 - 8 * j)) & np.uint32(0xFF)


def aes_reference_trace(key: bytes, plaintext: bytes) -> tuple[bytes, np.ndarray]:
    """Ciphertext and the 160 (table * 256 + index) lookups, no cache involved."""
    ct = np.zeros(16, dtype=np.uint8)
    idx = np.zeros(160, dtype=np.int64)
    _aes_trace(expand_key(key), TE, np.frombuffer(bytes(plaintext), dtype=np.uint8), ct, idx)
    return ct.tobytes(), idx


class TTableAES:
    """AES-128 whose table lookups are simulated memory accesses.

    The four 1 KiB tables sit back to back at ``table_vaddr``.  In shared
    mode they live in a shared object; in private mode in a private copy,
    which leaves Prime+Probe as the only way in.
    """

    TABLE_BYTES = 4 * 256 * 4

    def __init__(self, hier: Hierarchy, space: ProcessSpace, key: bytes, *, mode: str = "shared",
                 core: int = 1, disalignment: int = 0, page_offset: int = 0x400,
                 obj: str = "libcrypto.so", scrub_on_yield: bool = True):
        if mode not in ("shared", "private"):
            raise ValueError("mode is 'shared' or 'private'")
        line = hier.profile.line_size
        if disalignment % 4 or not 0 <= disalignment < line:
            raise ValueError("disalignment must be a multiple of 4 below the line size")
        if page_offset % line:
            raise ValueError("page_offset must be line aligned")
        self.hier, self.space, self.mode, self.core = hier, space, mode, core
        self.disalignment = disalignment
        self.scrub_on_yield = scrub_on_yield
        length = page_offset + disalignment + self.TABLE_BYTES
        self.mapping = space.map_shared(obj, length) if mode == "shared" else space.map_private(length)
        self.table_vaddr = self.mapping.virtual_base + page_offset + disalignment
        entries = self.table_vaddr + 4 * np.arange(1024)
        self._entry_lines = np.array([space.translate(int(v)) for v in entries], dtype=np.int64)
        self.set_key(key)
        self.encryptions = 0

    def set_key(self, key: bytes) -> None:
        self.key = bytes(key)
        self._rk = expand_key(self.key)

    def entry_paddr(self, table: int, index: int) -> int:
        return int(self._entry_lines[table * 256 + index])

    def trace(self, plaintext: bytes) -> tuple[bytes, np.ndarray]:
        ct = np.zeros(16, dtype=np.uint8)
        idx = np.zeros(160, dtype=np.int64)
        _aes_trace(self._rk, TE, np.frombuffer(bytes(plaintext), dtype=np.uint8), ct, idx)
        return ct.tobytes(), idx


def random_disalignment(rng: np.random.Generator, line_size: int = 64) -> int:
    """Table offset within a line for one victim start: 4-byte granular, uniform."""
    return 4 * int(rng.integers(line_size // 4))


def aes_encrypt(victim: TTableAES, plaintext: bytes) -> bytes:
    """Encrypt and issue every table lookup as a data access on the victim core."""
    ct, idx = victim.trace(plaintext)
    victim.hier.touch_many(victim.core, victim._entry_lines[idx], Kind.DATA)
    if victim.scrub_on_yield:
        victim.hier.scrub_l1(victim.core)
    victim.encryptions += 1
    return ct


# -- secure-world victim ------------------------------------------------------

def _key_seed(key_id: str | int, seed: int) -> int:
    h = hashlib.sha256(f"{seed}:{key_id}".encode()).digest()
    return int.from_bytes(h[:8], "little")


@dataclass
class Trustlet:
    """A secure-world signing service reduced to its instruction footprint.

    Every call runs a short fixed prefix touching ``prefix_sets`` sets; with
    a valid key it then runs ``loops`` passes of a signature loop over the
    sets of ``band``, a few key-dependent lines per set.
    """
    hier: Hierarchy
    core: int = 1
    flush_on_enter: bool = False
    band: tuple[int, int] = (250, 320)
    lines_per_set: int = 3
    loops: int = 4
    prefix_sets: tuple[int, ...] = (40, 41, 42, 43)
    key_id: str | int = "key-0"
    seed: int = 0
    secure_base: int = field(default=-1)

    def __post_init__(self):
        g = self.hier.profile.l2_geometry(self.core)
        self._geo = g
        self._way_bytes = g.sets * g.line_size
        if self.secure_base < 0:
            # carve-out at the top of physical memory, 64 ways deep
            self.secure_base = self.hier.profile.physical_memory - 64 * self._way_bytes
        if not 0 <= self.band[0] <= self.band[1] < g.sets:
            raise ValueError("band outside the L2")
        self._prefix = self._lines(self.prefix_sets, 1, "prefix")

    def _lines(self, sets, per_set: int, salt) -> np.ndarray:
        rng = np.random.default_rng(_key_seed(f"{salt}", self.seed))
        ways = rng.choice(64, size=(len(sets), per_set), replace=True) if per_set else np.zeros((len(sets), 0))
        s = np.asarray(sets, dtype=np.int64)[:, None]
        return (self.secure_base + ways.astype(np.int64) * self._way_bytes + s * self._geo.line_size).ravel()

    def band_sets(self) -> range:
        return range(self.band[0], self.band[1] + 1)

    def body_lines(self, key_id=None) -> np.ndarray:
        kid = self.key_id if key_id is None else key_id
        return self._lines(list(self.band_sets()), self.lines_per_set, kid)

    def touched_sets(self, key_valid: bool) -> set[int]:
        lines = [self._prefix] + ([self.body_lines()] if key_valid else [])
        return {int(p // self._geo.line_size) % self._geo.sets for p in np.concatenate(lines)}


def trustlet_invoke(t: Trustlet, key_valid: bool, on_chunk=None) -> int:
    """Run one call; ``on_chunk()`` (if given) runs after the prefix and each loop pass.

    Returns the number of body chunks executed.
    """
    h = t.hier
    if t.flush_on_enter:
        h.flush_all()
        if on_chunk is not None:
            on_chunk(prime=True)
    h.touch_many(t.core, t._prefix, Kind.INSTRUCTION)
    chunks = 1
    if on_chunk is not None:
        on_chunk()
    if key_valid:
        body = t.body_lines()
        for _ in range(t.loops):
            h.touch_many(t.core, body, Kind.INSTRUCTION)
            chunks += 1
            if on_chunk is not None:
                on_chunk()
    if t.flush_on_enter:
        h.flush_all()
    return chunks
