"""Covert channel: one shared line per frame bit, stop-and-wait with acks.

A frame is ``data (n) | seq (s) | checksum (c)``, most significant bit
first within each field.  The sender accesses the line of every 1-bit; the
receiver probes all frame lines and reads hit as 1.  A valid frame is
answered with an ack ``seq (s) | checksum (x)`` over a second set of lines.

Two links carry frames.  ``CacheLink`` runs both parties on the cache
simulator.  ``ModelLink`` replays per-bit error rates and per-line costs
fitted from a ``CacheLink`` and runs the whole protocol in compiled code,
which is what makes megabyte payloads affordable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _kernels as K
from .attacks import (CongruentPool, EvictReloadProber, FlushFlushProber, FlushReloadProber,
                      calibrate_flush, calibrate_reload)
from .cachesim import Hierarchy, set_index
from .eviction import EvictionSet, EvictionStrategy, NoPhysicalOracle
from .memspace import PagemapDenied, PhysicalMemory, ProcessSpace
from .timing import Threshold, TimerModel

PRIMITIVES = ("flush_reload", "evict_reload", "flush_flush")
CRC_POLY, CRC_INIT = 0x1021, 0xFFFF


class ChannelSetupError(Exception):
    pass


class ChannelStalled(Exception):
    def __init__(self, seq_index: int, attempts: int):
        super().__init__(f"packet {seq_index} still unacknowledged after {attempts} attempts")
        self.seq_index = seq_index
        self.attempts = attempts


# -- checksum -----------------------------------------------------------------

def crc16(bits) -> int:
    """CRC-16 (poly 0x1021, init 0xFFFF, no reflection) over a bit string."""
    crc = CRC_INIT
    for b in bits:
        crc ^= (int(b) & 1) << 15
        crc = ((crc << 1) ^ CRC_POLY) & 0xFFFF if crc & 0x8000 else (crc << 1) & 0xFFFF
    return crc


def checksum(bits, c: int) -> int:
    """The ``c`` low bits of ``crc16(bits)``."""
    if not 1 <= c <= 16:
        raise ValueError("checksum width must be in 1..16")
    return crc16(bits) & ((1 << c) - 1)


@dataclass(frozen=True)
class LinearChecksum:
    """``checksum`` as an affine map, for whole batches of frames.

    crc(b) = crc(0) xor (xor of column[i] over set bits i).
    """
    length: int
    width: int
    const: int
    columns: np.ndarray     # uint16 per input bit

    @classmethod
    def of(cls, length: int, width: int) -> "LinearChecksum":
        zero = np.zeros(length, dtype=np.uint8)
        const = crc16(zero)
        cols = np.empty(length, dtype=np.uint16)
        for i in range(length):
            e = zero.copy()
            e[i] = 1
            cols[i] = crc16(e) ^ const
        mask = (1 << width) - 1
        return cls(length, width, const & mask, cols & mask)

    def __call__(self, bits: np.ndarray) -> np.ndarray:
        bits = np.asarray(bits, dtype=bool).reshape(-1, self.length)
        acc = np.where(bits, self.columns, np.uint16(0))
        return np.bitwise_xor.reduce(acc, axis=1) ^ np.uint16(self.const)


def to_bits(value: int, width: int) -> np.ndarray:
    return ((int(value) >> np.arange(width - 1, -1, -1)) & 1).astype(np.uint8)


def from_bits(bits) -> int:
    v = 0
    for b in bits:
        v = (v << 1) | (int(b) & 1)
    return v


# -- frames -------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelConfig:
    n: int = 32
    s: int = 8
    c: int = 16
    x: int = 8
    bit_addresses: tuple[int, ...] = ()      # offsets into the shared object
    ack_addresses: tuple[int, ...] = ()
    primitive: str = "flush_reload"

    def __post_init__(self):
        if self.n < 1 or self.s < 1 or not 1 <= self.c <= 16 or not 1 <= self.x <= 16:
            raise ValueError("need n, s >= 1 and checksum widths in 1..16")
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}; choose from {PRIMITIVES}")
        if self.bit_addresses and len(self.bit_addresses) != self.frame_bits:
            raise ValueError(f"need {self.frame_bits} bit addresses, got {len(self.bit_addresses)}")
        if self.ack_addresses and len(self.ack_addresses) != self.ack_bits:
            raise ValueError(f"need {self.ack_bits} ack addresses, got {len(self.ack_addresses)}")

    @property
    def frame_bits(self) -> int:
        return self.n + self.s + self.c

    @property
    def ack_bits(self) -> int:
        return self.s + self.x

    def with_addresses(self, bits, acks) -> "ChannelConfig":
        return ChannelConfig(self.n, self.s, self.c, self.x, tuple(bits), tuple(acks), self.primitive)


@dataclass(frozen=True)
class Packet:
    data: int
    seq: int
    checksum: int

    @classmethod
    def make(cls, data: int, seq: int, cfg: ChannelConfig) -> "Packet":
        body = np.concatenate([to_bits(data, cfg.n), to_bits(seq % (1 << cfg.s), cfg.s)])
        return cls(data, seq % (1 << cfg.s), checksum(body, cfg.c))

    def bits(self, cfg: ChannelConfig) -> np.ndarray:
        return np.concatenate([to_bits(self.data, cfg.n), to_bits(self.seq, cfg.s),
                               to_bits(self.checksum, cfg.c)])

    @classmethod
    def from_bits(cls, bits, cfg: ChannelConfig) -> "Packet":
        bits = np.asarray(bits)
        return cls(from_bits(bits[:cfg.n]), from_bits(bits[cfg.n:cfg.n + cfg.s]),
                   from_bits(bits[cfg.n + cfg.s:]))

    def valid(self, cfg: ChannelConfig) -> bool:
        return self == Packet.make(self.data, self.seq, cfg)


def ack_bits(seq: int, cfg: ChannelConfig) -> np.ndarray:
    sb = to_bits(seq % (1 << cfg.s), cfg.s)
    return np.concatenate([sb, to_bits(checksum(sb, cfg.x), cfg.x)])


def parse_ack(bits, cfg: ChannelConfig) -> int | None:
    """Acknowledged sequence number, or None for a corrupt ack."""
    bits = np.asarray(bits)
    sb = bits[:cfg.s]
    if from_bits(bits[cfg.s:]) != checksum(sb, cfg.x):
        return None
    return from_bits(sb)


# -- the cache-simulated link ---------------------------------------------------

def pick_addresses(space: ProcessSpace, base: int, length: int, count: int, hier: Hierarchy,
                   core: int) -> list[int]:
    """Offsets of ``count`` lines of a mapping, each in a different L2 set."""
    geo = hier.profile.l2_geometry(core)
    used, out = set(), []
    for off in range(0, length, geo.line_size):
        s = set_index(geo, space.translate(base + off))
        if s not in used:
            used.add(s)
            out.append(off)
            if len(out) == count:
                return out
    raise ChannelSetupError(f"only {len(out)} distinct L2 sets in a {length}-byte mapping")


def check_set_disjoint(paddrs, hier: Hierarchy, core: int) -> None:
    geo = hier.profile.l2_geometry(core)
    sets = [set_index(geo, p) for p in paddrs]
    if len(set(sets)) != len(sets):
        dup = sorted(s for s in set(sets) if sets.count(s) > 1)
        raise ChannelSetupError(f"channel addresses share L2 sets {dup[:8]}")


class CacheLink:
    """Sender and receiver processes sharing one object on one simulated device."""

    def __init__(self, hier: Hierarchy, cfg: ChannelConfig, timer: TimerModel, rng: np.random.Generator,
                 sender_core: int = 0, receiver_core: int = 1, obj: str = "libcovert.so",
                 obj_size: int = 1 << 18, space_seed: int = 0,
                 strategy: EvictionStrategy = EvictionStrategy(21, 1, 6)):
        self.hier, self.timer, self.rng = hier, timer, rng
        self.sender_core, self.receiver_core = sender_core, receiver_core
        prof = hier.profile
        mem = PhysicalMemory(prof.physical_memory, prof.page_size, seed=space_seed)
        self.sender = ProcessSpace("sender", mem, pagemap_restricted=prof.pagemap_restricted)
        self.receiver = ProcessSpace("receiver", mem, pagemap_restricted=prof.pagemap_restricted)
        smap = self.sender.map_shared(obj, obj_size)
        rmap = self.receiver.map_shared(obj, obj_size)
        if not cfg.bit_addresses:
            offs = pick_addresses(self.sender, smap.virtual_base, smap.length,
                                  cfg.frame_bits + cfg.ack_bits, hier, receiver_core)
            cfg = cfg.with_addresses(offs[:cfg.frame_bits], offs[cfg.frame_bits:])
        self.cfg = cfg
        fwd = [self.receiver.translate(rmap.virtual_base + o) for o in cfg.bit_addresses]
        back = [self.sender.translate(smap.virtual_base + o) for o in cfg.ack_addresses]
        check_set_disjoint(fwd + back, hier, receiver_core)
        check_set_disjoint(fwd + back, hier, sender_core)
        self.fwd_paddrs, self.ack_paddrs = np.array(fwd), np.array(back)
        self.strategy = strategy
        self.rx = self._prober(receiver_core, sender_core, fwd, self.receiver, rmap.virtual_base,
                               cfg.bit_addresses)
        self.tx = self._prober(sender_core, receiver_core, back, self.sender, smap.virtual_base,
                               cfg.ack_addresses)
        self.rx.reset()
        self.tx.reset()

    def _prober(self, core, other, paddrs, proc, vbase, offsets):
        prof, cfg = self.hier.profile, self.cfg
        if cfg.primitive == "flush_flush":
            return FlushFlushProber(self.hier, core, paddrs, self.timer,
                                    calibrate_flush(prof, self.timer, self.rng), self.rng)
        thr = calibrate_reload(prof, self.timer, self.rng, core, other, samples=1000)
        if cfg.primitive == "flush_reload":
            return FlushReloadProber(self.hier, core, paddrs, self.timer, thr, self.rng)
        try:
            phys = [proc.pagemap_query(vbase + o) for o in offsets]
        except PagemapDenied as e:
            raise NoPhysicalOracle("no physical oracle: " + str(e)) from e
        pool = CongruentPool(proc, prof.l2_geometry(core))
        evsets = [pool.evset_for(p, self.strategy.N) for p in phys]
        return EvictReloadProber(self.hier, core, paddrs, evsets, self.strategy, self.timer, thr, self.rng)

    def _write(self, core: int, paddrs: np.ndarray, bits) -> int:
        return int(self._touch(core, paddrs[np.asarray(bits, dtype=bool)]).sum())

    def _touch(self, core: int, lines: np.ndarray) -> np.ndarray:
        """Writer accesses, per-access cycles.  Evict+Reload writers yield
        afterwards, draining their L1 so only the shared L2 copy remains."""
        if lines.size == 0:
            return np.zeros(0, dtype=np.int64)
        _, cy = self.hier.access_many(core, lines)
        if self.cfg.primitive == "evict_reload":
            self.hier.scrub_l1(core)
        return cy

    def forward(self, bits) -> tuple[np.ndarray, int]:
        """Sender writes ``bits``, receiver probes; returns (bits read, cycles)."""
        cost = self._write(self.sender_core, self.fwd_paddrs, bits)
        _, hit, probe = self.rx.round()
        return hit.astype(np.uint8), cost + probe

    def backward(self, bits) -> tuple[np.ndarray, int]:
        cost = self._write(self.receiver_core, self.ack_paddrs, bits)
        _, hit, probe = self.tx.round()
        return hit.astype(np.uint8), cost + probe


def send_packet(link: CacheLink, packet: Packet) -> int:
    """Access the line of every 1-bit of ``packet``; returns the cycles used."""
    return link._write(link.sender_core, link.fwd_paddrs, packet.bits(link.cfg))


def receive_packet(link: CacheLink, noise: float = 0.0, rng: np.random.Generator | None = None
                   ) -> tuple[Packet | None, int]:
    """Probe every frame line; (packet, cycles), with packet None when corrupt."""
    _, hit, cost = link.rx.round()
    bits = hit.astype(np.uint8)
    if noise > 0:
        bits ^= (rng.random(bits.size) < noise).astype(np.uint8)
    p = Packet.from_bits(bits, link.cfg)
    return (p if p.valid(link.cfg) else None), int(cost)


# -- transmission -----------------------------------------------------------------

@dataclass
class ChannelStats:
    bits_delivered: int
    cycles: int
    packet_error_rate: float
    undetected_errors: int
    packets: int = 0
    attempts: int = 0
    delivered: bytes = field(default=b"", repr=False)

    @property
    def bandwidth(self) -> float:
        """Delivered payload bits per million simulated cycles."""
        return self.bits_delivered * 1e6 / self.cycles if self.cycles else 0.0

    def row(self) -> dict:
        return {"bits_delivered": self.bits_delivered, "cycles": self.cycles,
                "bandwidth_bits_per_Mcycle": f"{self.bandwidth:.6f}",
                "packet_error_rate": f"{self.packet_error_rate:.6f}",
                "undetected_errors": self.undetected_errors}


def segment(payload: bytes, n: int) -> np.ndarray:
    """Payload bits as rows of ``n``, zero padded; the length travels out of band."""
    if not payload:
        raise ValueError("payload must be non-empty")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    rows = -(-bits.size // n)
    out = np.zeros(rows * n, dtype=np.uint8)
    out[:bits.size] = bits
    return out.reshape(rows, n)


def frames(payload: bytes, cfg: ChannelConfig) -> np.ndarray:
    """Every frame of ``payload`` as a bit matrix, one row per packet."""
    data = segment(payload, cfg.n)
    k = np.arange(data.shape[0])
    seq = ((k[:, None] % (1 << cfg.s)) >> np.arange(cfg.s - 1, -1, -1)) & 1
    body = np.concatenate([data, seq.astype(np.uint8)], axis=1)
    chk = LinearChecksum.of(cfg.n + cfg.s, cfg.c)(body)
    cbits = (chk[:, None].astype(np.int64) >> np.arange(cfg.c - 1, -1, -1)) & 1
    return np.concatenate([body, cbits.astype(np.uint8)], axis=1)


def _assemble(out: np.ndarray, size: int) -> bytes:
    return np.packbits(out.reshape(-1)[:size * 8]).tobytes()


def transmit(payload: bytes, link, noise: float = 0.0, rng: np.random.Generator | None = None,
             max_attempts: int = 64) -> ChannelStats:
    """Deliver ``payload`` over ``link`` with stop-and-wait retransmission.

    ``noise`` flips each bit the receiving side reads, in both directions,
    before its checksum is checked.  Raises ``ChannelStalled`` when one
    packet goes unacknowledged for ``max_attempts`` tries.
    """
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must be a probability")
    if isinstance(link, ModelLink):
        return link.transmit(payload, noise, max_attempts)
    if rng is None:
        rng = link.rng
    cfg = link.cfg
    fr = frames(payload, cfg)
    P = fr.shape[0]
    rx = Receiver(cfg, P, truth=fr[:, :cfg.n])
    cycles = attempts = corrupt = 0
    for k in range(P):
        tries = 0
        while True:
            tries += 1
            if tries > max_attempts:
                raise ChannelStalled(k, max_attempts)
            attempts += 1
            got, cy = link.forward(fr[k])
            cycles += cy
            if noise:
                got ^= (rng.random(got.size) < noise).astype(np.uint8)
            ack = rx.accept(got)
            corrupt += ack is None and not rx.last_valid
            abits = ack_bits(ack, cfg) if ack is not None else np.zeros(cfg.ack_bits, dtype=np.uint8)
            back, cy = link.backward(abits)
            cycles += cy
            if noise:
                back ^= (rng.random(back.size) < noise).astype(np.uint8)
            if parse_ack(back, cfg) == k % (1 << cfg.s):
                break
    return ChannelStats(len(payload) * 8, cycles, corrupt / attempts, rx.undetected, P, attempts,
                        _assemble(rx.out, len(payload)))


class Receiver:
    """Receiving end of stop-and-wait.

    Delivers a valid frame whose seq is the next expected one and acks it;
    re-acks, without delivering, a valid frame up to half the sequence
    space behind.  Frames ahead of the expected one are ignored.
    ``truth`` (sent data per slot) is the ground-truth tap used to count
    frames that passed the checksum with wrong content.
    """

    def __init__(self, cfg: ChannelConfig, packets: int, truth: np.ndarray | None = None):
        self.cfg = cfg
        self.out = np.zeros((packets, cfg.n), dtype=np.uint8)
        self.truth = truth
        self.expected = 0
        self.undetected = 0
        self.last_valid = False

    def accept(self, bits) -> int | None:
        """Sequence number to acknowledge, or None."""
        cfg = self.cfg
        S = 1 << cfg.s
        bits = np.asarray(bits, dtype=np.uint8)
        p = Packet.from_bits(bits, cfg)
        self.last_valid = p.valid(cfg)
        if not self.last_valid:
            return None
        if p.seq == self.expected % S:
            slot = self.expected
            if slot < len(self.out):
                if self.truth is not None and not np.array_equal(bits[:cfg.n], self.truth[slot]):
                    self.undetected += 1
                self.out[slot] = bits[:cfg.n]
            elif self.truth is not None:
                self.undetected += 1
            self.expected += 1
            return p.seq
        # a valid frame from the recent past is re-acked, whether it is a plain
        # duplicate or the sender lagging after an undetected seq corruption
        if 1 <= (self.expected - p.seq) % S <= S // 2:
            return p.seq
        return None


def undetected_rate(cfg: ChannelConfig, p: float) -> float:
    """Chance that one frame of an undelivered packet is accepted with wrong data.

    Independent flips with probability ``p`` go unnoticed when the data and
    checksum error pattern is itself a codeword and the seq bits survive.
    The codeword weights come from the 2^c words of the dual code via the
    MacWilliams identity.
    """
    return float(np.dot(weight_distribution(cfg), _pattern_probs(cfg.n + cfg.c, p))) * (1 - p) ** cfg.s


def weight_distribution(cfg: ChannelConfig) -> np.ndarray:
    """A[w]: nonzero data|checksum error patterns of weight w with zero syndrome."""
    from math import comb
    lin = LinearChecksum.of(cfg.n + cfg.s, cfg.c)
    cols = [int(c) for c in lin.columns[:cfg.n]] + [1 << (cfg.c - 1 - j) for j in range(cfg.c)]
    N = len(cols)
    H = ((np.array(cols)[None, :] >> np.arange(cfg.c - 1, -1, -1)[:, None]) & 1).astype(np.int64)
    u = (np.arange(1 << cfg.c)[:, None] >> np.arange(cfg.c)) & 1
    B = np.bincount(((u @ H) % 2).sum(axis=1), minlength=N + 1)
    # Krawtchouk transform, exact in integers
    A = [sum(int(B[j]) * sum((-1) ** i * comb(j, i) * comb(N - j, w - i) for i in range(w + 1))
             for j in range(N + 1)) // (1 << cfg.c) for w in range(N + 1)]
    A[0] = 0
    return np.array(A, dtype=np.float64)


def _pattern_probs(N: int, p: float) -> np.ndarray:
    w = np.arange(N + 1)
    return p ** w * (1 - p) ** (N - w)


# -- the fitted model link ------------------------------------------------------------

@dataclass
class LinkModel:
    """Per-line behaviour of a primitive, measured on a ``CacheLink``.

    q1 is the chance a written line reads 0, q0 the chance an untouched
    line reads 1.  The cost arrays are empirical samples of one sender
    access and of one probe of a written/untouched line.
    """
    q1: float
    q0: float
    send_cost: np.ndarray
    probe1_cost: np.ndarray
    probe0_cost: np.ndarray

    @classmethod
    def fit(cls, link: CacheLink, rounds: int = 400, rng: np.random.Generator | None = None) -> "LinkModel":
        rng = link.rng if rng is None else rng
        h, cfg = link.hier, link.cfg
        rx, core = link.rx, link.receiver_core
        if cfg.primitive == "flush_reload":
            singles = [FlushReloadProber(h, core, [p], link.timer, rx.threshold, rng) for p in link.fwd_paddrs]
        elif cfg.primitive == "flush_flush":
            singles = [FlushFlushProber(h, core, [p], link.timer, rx.threshold, rng) for p in link.fwd_paddrs]
        else:
            # per-line probers reuse the link's eviction sets
            singles = [EvictReloadProber(h, core, [p], [_evset_row(rx, i)], link.strategy, link.timer,
                                         rx.threshold, rng) for i, p in enumerate(link.fwd_paddrs)]
        for s in singles:
            s.reset()
        send, p1, p0, r1, r0 = [], [], [], [], []
        for _ in range(rounds):
            bits = rng.integers(0, 2, link.fwd_paddrs.size).astype(bool)
            send.extend(link._touch(link.sender_core, link.fwd_paddrs[bits]).tolist())
            for i, s in enumerate(singles):
                _, hit, cost = s.round()
                (p1 if bits[i] else p0).append(cost)
                (r1 if bits[i] else r0).append(bool(hit[0]))
        return cls(1.0 - float(np.mean(r1)), float(np.mean(r0)), np.array(send, dtype=np.int64),
                   np.array(p1, dtype=np.int64), np.array(p0, dtype=np.int64))


def _evset_row(prober: EvictReloadProber, i: int) -> EvictionSet:
    return EvictionSet(0, tuple(int(x) << prober.hier.line_shift for x in prober.evsets[i]))


class ModelLink:
    """Runs the protocol against a ``LinkModel`` instead of the simulator."""

    def __init__(self, model: LinkModel, cfg: ChannelConfig, seed: int = 0):
        self.model, self.cfg = model, cfg
        self.seed = seed

    def transmit(self, payload: bytes, noise: float, max_attempts: int = 64) -> ChannelStats:
        cfg, m = self.cfg, self.model
        fr = frames(payload, cfg)
        P = fr.shape[0]
        body = LinearChecksum.of(cfg.n + cfg.s, cfg.c)
        ackc = LinearChecksum.of(cfg.s, cfg.x)
        S = 1 << cfg.s
        acks = np.stack([ack_bits(q, cfg) for q in range(S)])
        out = np.zeros((P, cfg.n), dtype=np.uint8)
        scratch = np.zeros(fr.shape[1] + acks.shape[1], dtype=np.uint8)
        res = np.zeros(8, dtype=np.int64)
        rng = np.array([np.random.SeedSequence([self.seed, 0xC0]).generate_state(1, dtype=np.uint64)[0]],
                       dtype=np.uint64)
        _model_transmit(fr, acks, cfg.n, cfg.s, body.columns.astype(np.int64), body.const,
                        ackc.columns.astype(np.int64), ackc.const, m.q1, m.q0, noise,
                        m.send_cost, m.probe1_cost, m.probe0_cost, max_attempts, rng, out, scratch, res)
        cycles, attempts, corrupt, undetected, status, stalled_at = res[:6]
        if status:
            raise ChannelStalled(int(stalled_at), max_attempts)
        return ChannelStats(len(payload) * 8, int(cycles), float(corrupt / attempts), int(undetected), P, int(attempts),
                            _assemble(out, len(payload)))


@njit(cache=True, _nrt=False, inline="always")
def _read(b, q1, q0, noise, rng):
    r = b
    if K.rng_uniform(rng) < (q1 if b else q0):
        r ^= 1
    if noise > 0.0 and K.rng_uniform(rng) < noise:
        r ^= 1
    return r


@njit(cache=True, _nrt=False)
def _model_transmit(fr, acks, n, s, cols, const, acols, aconst, q1, q0, noise,
                    send_cost, p1_cost, p0_cost, max_attempts, rng, out, scratch, res):
    P, L = fr.shape[0], fr.shape[1]
    A = acks.shape[1]
    S = 1 << s
    ns, n1, n0 = send_cost.shape[0], p1_cost.shape[0], p0_cost.shape[0]
    cycles = 0
    attempts = 0
    corrupt = 0
    undetected = 0
    expected = 0
    for k in range(P):
        tries = 0
        while True:
            tries += 1
            if tries > max_attempts:
                res[0] = cycles
                res[1] = attempts
                res[2] = corrupt
                res[3] = undetected
                res[4] = 1
                res[5] = k
                return
            attempts += 1
            # forward frame
            calc = const
            rseq = 0
            rchk = 0
            for i in range(L):
                b = fr[k, i]
                if b:
                    cycles += send_cost[K.rng_below(rng, ns)]
                    cycles += p1_cost[K.rng_below(rng, n1)]
                else:
                    cycles += p0_cost[K.rng_below(rng, n0)]
                r = _read(b, q1, q0, noise, rng)
                scratch[i] = r
                if i < n + s:
                    if r:
                        calc ^= cols[i]
                    if i >= n:
                        rseq = (rseq << 1) | r
                else:
                    rchk = (rchk << 1) | r
            ack = -1
            if calc != rchk:
                corrupt += 1
            elif rseq == expected % S:
                bad = expected >= P
                if not bad:
                    for i in range(n):
                        if scratch[i] != fr[expected, i]:
                            bad = True
                        out[expected, i] = scratch[i]
                if bad:
                    undetected += 1
                expected += 1
                ack = rseq
            elif 1 <= (expected - rseq) % S <= S // 2:
                ack = rseq
            # acknowledgement
            acalc = aconst
            aseq = 0
            achk = 0
            for i in range(A):
                b = acks[ack, i] if ack >= 0 else 0
                if b:
                    cycles += send_cost[K.rng_below(rng, ns)]
                    cycles += p1_cost[K.rng_below(rng, n1)]
                else:
                    cycles += p0_cost[K.rng_below(rng, n0)]
                r = _read(b, q1, q0, noise, rng)
                if i < s:
                    if r:
                        acalc ^= acols[i]
                    aseq = (aseq << 1) | r
                else:
                    achk = (achk << 1) | r
            if acalc == achk and aseq == k % S:
                break
    res[0] = cycles
    res[1] = attempts
    res[2] = corrupt
    res[3] = undetected
    res[4] = 0
    res[5] = -1
