"""Compiled inner loops of the cache hierarchy.

All state lives in flat numpy arrays owned by :class:`armcache.cachesim.Hierarchy`;
these functions only mutate them.  Layout of ``meta`` (int64):

    0 n_caches  1 n_cores  2 n_clusters  3 coherent  4 lru clock  5 line shift
    6 core table offset  7 cluster table offset
    8..  per cache: sets, ways, policy, tag offset, rr offset, line shift
    core table: l1i, l1d, cluster
    cluster table: l2, mode_instr, mode_data

Line numbers passed around are in units of the smallest line size; a cache
with larger lines stores ``line >> shift`` as its tag.
"""
import numpy as np
from numba import njit

LRU, RANDOM, ROUND_ROBIN = 0, 1, 2
INCLUSIVE, VICTIM = 0, 1
INSTR, DATA = 0, 1
L1, L2, REMOTE, DRAM = 0, 1, 2, 3
FLUSH_CACHED, FLUSH_UNCACHED = 4, 5
CACHE_TABLE = 8
CACHE_FIELDS = 6


# splitmix64; state is a one-element uint64 array
@njit(cache=True, _nrt=False, inline="always")
def rng_next(rng):
    rng[0] += np.uint64(0x9E3779B97F4A7C15)
    z = rng[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, _nrt=False, inline="always")
def rng_uniform(rng):
    return (rng_next(rng) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True, _nrt=False, inline="always")
def rng_below(rng, n):
    return np.int64((rng_next(rng) >> np.uint64(11)) % np.uint64(n))


@njit(cache=True, _nrt=False, inline="always")
def geometric(rng, mean):
    """Non-negative integer noise with P(X >= k) = (mean / (1 + mean)) ** k."""
    if mean <= 0.0:
        return 0
    u = rng_uniform(rng)
    if u <= 0.0:
        u = 1e-300
    return np.int64(np.floor(np.log(u) / np.log(mean / (1.0 + mean))))


@njit(cache=True, _nrt=False, inline="always")
def draw_latency(lat, rng, cls):
    return np.int64(lat[cls]) + geometric(rng, lat[6 + cls])


@njit(cache=True, _nrt=False, inline="always")
def _cache(meta, c):
    b = CACHE_TABLE + CACHE_FIELDS * c
    return meta[b], meta[b + 1], meta[b + 2], meta[b + 3], meta[b + 4]


@njit(cache=True, _nrt=False, inline="always")
def shift_of(meta, c):
    return meta[CACHE_TABLE + CACHE_FIELDS * c + 5]


@njit(cache=True, _nrt=False, inline="always")
def set_base(meta, c, line):
    sets, ways, _, off, _ = _cache(meta, c)
    return off + ((line >> shift_of(meta, c)) & (sets - 1)) * ways, ways


@njit(cache=True, _nrt=False, inline="always")
def lookup(meta, tags, c, line):
    base, ways = set_base(meta, c, line)
    t = line >> shift_of(meta, c)
    for w in range(ways):
        if tags[base + w] == t:
            return base + w
    return -1


@njit(cache=True, _nrt=False, inline="always")
def touch(meta, stamps, slot):
    meta[4] += 1
    stamps[slot] = meta[4]


@njit(cache=True, _nrt=False, inline="always")
def remove(meta, tags, stamps, c, line):
    slot = lookup(meta, tags, c, line)
    if slot >= 0:
        tags[slot] = -1
        stamps[slot] = 0
        return True
    return False


@njit(cache=True, _nrt=False)
def insert(meta, tags, stamps, rr, rng, c, line):
    """Place ``line`` into cache ``c``; returns the displaced tag or -1."""
    sets, ways, policy, off, rr_off = _cache(meta, c)
    t = line >> shift_of(meta, c)
    s = t & (sets - 1)
    base = off + s * ways
    if policy == LRU:
        w = 0
        best = stamps[base]
        for k in range(1, ways):
            if stamps[base + k] < best:
                best = stamps[base + k]
                w = k
    elif policy == RANDOM:
        w = rng_below(rng, ways)
    else:
        w = rr[rr_off + s]
        rr[rr_off + s] = (w + 1) % ways
    slot = base + w
    victim = tags[slot]
    tags[slot] = t
    touch(meta, stamps, slot)
    return victim


@njit(cache=True, _nrt=False, inline="always")
def core_info(meta, core):
    b = meta[6] + 3 * core
    return meta[b], meta[b + 1], meta[b + 2]


@njit(cache=True, _nrt=False, inline="always")
def cluster_info(meta, cl):
    b = meta[7] + 3 * cl
    return meta[b], meta[b + 1], meta[b + 2]


@njit(cache=True, _nrt=False)
def back_invalidate(meta, tags, stamps, cl, l2, tag):
    _, mode_i, mode_d = cluster_info(meta, cl)
    sh = shift_of(meta, l2)
    for core in range(meta[1]):
        l1i, l1d, ccl = core_info(meta, core)
        if ccl != cl:
            continue
        if mode_i == INCLUSIVE and l1i >= 0:
            for sub in range(0, 1 << sh, 1 << shift_of(meta, l1i)):
                remove(meta, tags, stamps, l1i, (tag << sh) + sub)
        if mode_d == INCLUSIVE and l1d >= 0:
            for sub in range(0, 1 << sh, 1 << shift_of(meta, l1d)):
                remove(meta, tags, stamps, l1d, (tag << sh) + sub)


@njit(cache=True, _nrt=False)
def install_l2(meta, tags, stamps, rr, rng, cl, line):
    l2, _, _ = cluster_info(meta, cl)
    if l2 < 0:
        return
    slot = lookup(meta, tags, l2, line)
    if slot >= 0:
        touch(meta, stamps, slot)
        return
    victim = insert(meta, tags, stamps, rr, rng, l2, line)
    if victim >= 0:
        back_invalidate(meta, tags, stamps, cl, l2, victim)


@njit(cache=True, _nrt=False)
def fill_l1(meta, tags, stamps, rr, rng, l1, cl, mode, line):
    victim = insert(meta, tags, stamps, rr, rng, l1, line)
    if victim >= 0 and mode == VICTIM:
        install_l2(meta, tags, stamps, rr, rng, cl, victim << shift_of(meta, l1))


@njit(cache=True, _nrt=False)
def held_inclusive(meta, tags, cl, l2, line):
    """Whether an L1 of an inclusive kind in cluster ``cl`` holds part of ``line``'s L2 line."""
    _, mode_i, mode_d = cluster_info(meta, cl)
    sh = shift_of(meta, l2)
    first = (line >> sh) << sh
    for core in range(meta[1]):
        l1i, l1d, ccl = core_info(meta, core)
        if ccl != cl:
            continue
        if mode_i == INCLUSIVE and l1i >= 0:
            for sub in range(0, 1 << sh, 1 << shift_of(meta, l1i)):
                if lookup(meta, tags, l1i, first + sub) >= 0:
                    return True
        if mode_d == INCLUSIVE and l1d >= 0:
            for sub in range(0, 1 << sh, 1 << shift_of(meta, l1d)):
                if lookup(meta, tags, l1d, first + sub) >= 0:
                    return True
    return False


@njit(cache=True, _nrt=False)
def remote_present(meta, tags, core, line):
    _, _, cl = core_info(meta, core)
    coherent = meta[3]
    for other in range(meta[1]):
        if other == core:
            continue
        l1i, l1d, ocl = core_info(meta, other)
        if ocl != cl and not coherent:
            continue
        if l1i >= 0 and lookup(meta, tags, l1i, line) >= 0:
            return True
        if l1d >= 0 and lookup(meta, tags, l1d, line) >= 0:
            return True
    if coherent:
        for ocl in range(meta[2]):
            if ocl == cl:
                continue
            l2, _, _ = cluster_info(meta, ocl)
            if l2 >= 0 and lookup(meta, tags, l2, line) >= 0:
                return True
    return False


@njit(cache=True, _nrt=False)
def access_one(meta, tags, stamps, rr, rng, core, line, kind):
    """One memory access; returns the servicing level."""
    l1i, l1d, cl = core_info(meta, core)
    l1 = l1i if kind == INSTR else l1d
    l2, mode_i, mode_d = cluster_info(meta, cl)
    mode = mode_i if kind == INSTR else mode_d
    if l1 >= 0:
        slot = lookup(meta, tags, l1, line)
        if slot >= 0:
            touch(meta, stamps, slot)
            return L1
    if l2 >= 0:
        slot = lookup(meta, tags, l2, line)
        if slot >= 0:
            if l1 < 0:
                touch(meta, stamps, slot)
            elif mode == VICTIM and not held_inclusive(meta, tags, cl, l2, line):
                # victim caches hand the line back to L1, unless the other
                # side's inclusion still needs the L2 copy
                tags[slot] = -1
                stamps[slot] = 0
                fill_l1(meta, tags, stamps, rr, rng, l1, cl, mode, line)
            else:
                touch(meta, stamps, slot)
                fill_l1(meta, tags, stamps, rr, rng, l1, cl, mode, line)
            return L2
    level = DRAM
    if remote_present(meta, tags, core, line):
        level = REMOTE
    if l1 < 0:
        install_l2(meta, tags, stamps, rr, rng, cl, line)
    else:
        if mode == INCLUSIVE:
            install_l2(meta, tags, stamps, rr, rng, cl, line)
        fill_l1(meta, tags, stamps, rr, rng, l1, cl, mode, line)
    return level


@njit(cache=True, _nrt=False)
def access_batch(meta, tags, stamps, rr, rng, lat, core, lines, kind, levels, cycles):
    total = 0
    for i in range(lines.shape[0]):
        lv = access_one(meta, tags, stamps, rr, rng, core, lines[i], kind)
        cy = draw_latency(lat, rng, lv)
        levels[i] = lv
        cycles[i] = cy
        total += cy
    return total


@njit(cache=True, _nrt=False)
def touch_batch(meta, tags, stamps, rr, rng, core, lines, kind):
    """Accesses whose timing nobody observes (victim work)."""
    for i in range(lines.shape[0]):
        access_one(meta, tags, stamps, rr, rng, core, lines[i], kind)


@njit(cache=True, _nrt=False)
def present_anywhere(meta, tags, line):
    for c in range(meta[0]):
        if lookup(meta, tags, c, line) >= 0:
            return True
    return False


@njit(cache=True, _nrt=False)
def flush_one(meta, tags, stamps, rng, lat, line):
    cached = False
    for c in range(meta[0]):
        if remove(meta, tags, stamps, c, line):
            cached = True
    cls = FLUSH_CACHED if cached else FLUSH_UNCACHED
    return draw_latency(lat, rng, cls), cached


@njit(cache=True, _nrt=False)
def flush_batch(meta, tags, stamps, rng, lat, lines, cycles):
    total = 0
    for i in range(lines.shape[0]):
        cy, _ = flush_one(meta, tags, stamps, rng, lat, lines[i])
        cycles[i] = cy
        total += cy
    return total


@njit(cache=True, _nrt=False)
def scrub_l1(meta, tags, stamps, rr, rng, core):
    """Empty a core's L1 caches, writing lines back per inclusion mode."""
    l1i, l1d, cl = core_info(meta, core)
    _, mode_i, mode_d = cluster_info(meta, cl)
    for k in range(2):
        c = l1i if k == 0 else l1d
        mode = mode_i if k == 0 else mode_d
        if c < 0:
            continue
        sets, ways, _, off, _ = _cache(meta, c)
        sh = shift_of(meta, c)
        for slot in range(off, off + sets * ways):
            t = tags[slot]
            if t >= 0:
                tags[slot] = -1
                stamps[slot] = 0
                if mode == VICTIM:
                    install_l2(meta, tags, stamps, rr, rng, cl, t << sh)


@njit(cache=True, _nrt=False)
def clear_set(meta, tags, stamps, c, line):
    base, ways = set_base(meta, c, line)
    for w in range(ways):
        tags[base + w] = -1
        stamps[base + w] = 0


@njit(cache=True, _nrt=False)
def run_pattern_lines(meta, tags, stamps, rr, rng, lat, core, members, n, a, d):
    """Eviction loop: for i in 0..n-d step a, access members[i..i+d-1]."""
    total = 0
    i = 0
    while i <= n - d:
        for j in range(d):
            lv = access_one(meta, tags, stamps, rr, rng, core, members[i + j], DATA)
            total += draw_latency(lat, rng, lv)
        i += a
    return total


@njit(cache=True, _nrt=False)
def eviction_trials(meta, tags, stamps, rr, rng, lat, core, target, pool, junk_stride,
                    n, a, d, trials, junk_base):
    """Repeated (load target, run pattern, check residency) trials.

    Before each trial the target's L1 and L2 sets are emptied and refilled
    with junk lines congruent to the target, so replacement state does not
    carry over between trials.  Returns (evicted count, total pattern cycles).
    """
    l1i, l1d, cl = core_info(meta, core)
    l2, _, mode_d = cluster_info(meta, cl)
    evicted = 0
    cycles = 0
    for t in range(trials):
        if l1d >= 0:
            clear_set(meta, tags, stamps, l1d, target)
        if l2 >= 0:
            clear_set(meta, tags, stamps, l2, target)
            base, ways = set_base(meta, l2, target)
            sh2 = shift_of(meta, l2)
            for w in range(ways):
                jl = junk_base + (rng_below(rng, 1 << 20) * 2 + 1) * junk_stride + target
                tags[base + w] = jl >> sh2
                touch(meta, stamps, base + w)
        if l1d >= 0:
            base1, ways1 = set_base(meta, l1d, target)
            for w in range(ways1):
                if mode_d == INCLUSIVE and l2 >= 0:
                    b2, w2 = set_base(meta, l2, target)
                    jl = (tags[b2 + (w % w2)] << shift_of(meta, l2)) | (target & ((1 << shift_of(meta, l2)) - 1))
                else:
                    jl = junk_base + (rng_below(rng, 1 << 20) * 2) * junk_stride + target
                tags[base1 + w] = jl
                touch(meta, stamps, base1 + w)
        access_one(meta, tags, stamps, rr, rng, core, target, DATA)
        cycles += run_pattern_lines(meta, tags, stamps, rr, rng, lat, core, pool, n, a, d)
        if not present_anywhere(meta, tags, target):
            evicted += 1
    return evicted, cycles


@njit(cache=True, _nrt=False)
def reload_flush_batch(meta, tags, stamps, rr, rng, lat, core, lines, kind, levels, cycles):
    """Flush+Reload round: timed reload of each line, then flush it.

    ``cycles`` receives the reload latencies; returns the round's total cost.
    """
    total = 0
    for i in range(lines.shape[0]):
        lv = access_one(meta, tags, stamps, rr, rng, core, lines[i], kind)
        cy = draw_latency(lat, rng, lv)
        levels[i] = lv
        cycles[i] = cy
        fc, _ = flush_one(meta, tags, stamps, rng, lat, lines[i])
        total += cy + fc
    return total


@njit(cache=True, _nrt=False)
def reload_evict_batch(meta, tags, stamps, rr, rng, lat, core, lines, kind, evsets, n, a, d,
                       levels, cycles):
    """Evict+Reload round: timed reload of each line, then its eviction loop."""
    total = 0
    for i in range(lines.shape[0]):
        lv = access_one(meta, tags, stamps, rr, rng, core, lines[i], kind)
        cy = draw_latency(lat, rng, lv)
        levels[i] = lv
        cycles[i] = cy
        total += cy + run_pattern_lines(meta, tags, stamps, rr, rng, lat, core, evsets[i], n, a, d)
    return total


@njit(cache=True, _nrt=False)
def prime_batch(meta, tags, stamps, rr, rng, core, primes, counts, kind):
    """Forward prime of every row of ``primes``."""
    for r in range(primes.shape[0]):
        for j in range(counts[r]):
            access_one(meta, tags, stamps, rr, rng, core, primes[r, j], kind)


@njit(cache=True, _nrt=False)
def probe_batch(meta, tags, stamps, rr, rng, lat, core, primes, counts, kind, levels, cycles):
    """Prime+Probe probe step over several sets.

    Row ``r`` of ``primes`` holds ``counts[r]`` lines in prime order; they
    are re-accessed backwards, which also re-establishes the prime.
    """
    total = 0
    for r in range(primes.shape[0]):
        for j in range(counts[r] - 1, -1, -1):
            lv = access_one(meta, tags, stamps, rr, rng, core, primes[r, j], kind)
            cy = draw_latency(lat, rng, lv)
            levels[r, j] = lv
            cycles[r, j] = cy
            total += cy
    return total


@njit(cache=True, _nrt=False)
def settle_batch(meta, tags, stamps, rr, rng, lat, core, primes, counts, kind, dirty, max_passes):
    """Re-probe each dirty row until a backward pass has no memory access."""
    total = 0
    for r in range(primes.shape[0]):
        if not dirty[r]:
            continue
        for _ in range(max_passes):
            missed = False
            for j in range(counts[r] - 1, -1, -1):
                lv = access_one(meta, tags, stamps, rr, rng, core, primes[r, j], kind)
                total += draw_latency(lat, rng, lv)
                if lv == DRAM:
                    missed = True
            if not missed:
                break
    return total
