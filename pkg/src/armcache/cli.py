"""Command line experiment runner.

Every subcommand needs ``--seed`` and writes one CSV to ``--out``.  Values
come from the subcommand's scenario file unless overridden by a flag.
"""
from __future__ import annotations

import argparse
import csv
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (AESAttack, AmbiguousTemplate, TemplateBench, TrustletSpy, aes_recover_upper_nibbles,
                       mse_profile, profile)
from .attacks import (CongruentPool, EvictReloadProber, FlushFlushProber, FlushReloadProber, PrimeProbeProber,
                      calibrate_flush, calibrate_reload, latency_samples, monitor)
from .cachesim import Hierarchy, UnsupportedOperation, load_profile
from .covert import (CacheLink, ChannelConfig, ChannelSetupError, ChannelStalled, LinkModel, ModelLink,
                     transmit)
from .eviction import EvictionStrategy, NoPhysicalOracle, PoolExhausted, parse_grid, search
from .memspace import PagemapDenied, PhysicalMemory, ProcessSpace
from .scenarios import ScenarioError, load_scenario
from .timing import PRESETS, CalibrationFailed, Histogram, timer
from .victims import EventLibrary, EventVictim, Scheduler, TTableAES, Trustlet, random_disalignment, trigger_event

MODULE_ERRORS = (NoPhysicalOracle, PoolExhausted, ChannelStalled, ChannelSetupError, CalibrationFailed,
                 UnsupportedOperation, AmbiguousTemplate)
COVERT_ALIASES = {"fr": "flush_reload", "er": "evict_reload", "ff": "flush_flush"}


def derive(seed: int, label: str) -> int:
    """Independent 64-bit seed for one named random stream."""
    ss = np.random.SeedSequence([seed & (2**64 - 1), zlib.crc32(label.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive(seed, label))


def write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _profile(args, sc: dict):
    prof = load_profile(args.profile or sc.get("profile", "galaxy-s6"))
    if args.pagemap_restricted:
        prof = prof.with_(pagemap_restricted=True)
    return prof


def _timer(args, sc: dict):
    return timer(args.timer or sc.get("timer", "register"))


def _processes(prof, seed: int, *names):
    mem = PhysicalMemory(prof.physical_memory, prof.page_size, seed=derive(seed, "memory"))
    return [ProcessSpace(n, mem, pagemap_restricted=prof.pagemap_restricted) for n in names]


# -- subcommands ------------------------------------------------------------------

def cmd_evict(args) -> int:
    sc = load_scenario(args.scenario or "evict", "evict")
    prof = _profile(args, sc)
    grid = parse_grid(args.grid or sc["grid"])
    trials = args.trials or sc.get("trials", 1000)
    results = search(grid, prof, trials, seed=derive(args.seed, "evict"), core=sc.get("core", 0))
    rows = sorted(((s.N, s.A, s.D, f"{r.avg_cycles:.3f}", f"{r.eviction_rate:.6f}") for s, r in results))
    write_csv(args.out, ["N", "A", "D", "avg_cycles", "eviction_rate"], rows)
    best = results[0]
    print(f"best {best[0]}: rate {best[1].eviction_rate:.4f}, {best[1].avg_cycles:.1f} cycles")
    return 0


def _prober(kind: str, hier, space, paddrs, timer_, rng, core: int, victim_core: int,
            strategy: EvictionStrategy):
    prof = hier.profile
    if kind == "fr":
        return FlushReloadProber(hier, core, paddrs, timer_,
                                 calibrate_reload(prof, timer_, rng, core, victim_core, 1000), rng)
    if kind == "ff":
        return FlushFlushProber(hier, core, paddrs, timer_, calibrate_flush(prof, timer_, rng), rng)
    geo = prof.l2_geometry(core)
    pool = CongruentPool(space, geo)
    if kind == "er":
        thr = calibrate_reload(prof, timer_, rng, core, victim_core, 1000)
        return EvictReloadProber(hier, core, paddrs, [pool.evset_for(p, strategy.N) for p in paddrs],
                                 strategy, timer_, thr, rng)
    if kind == "pp":
        p = PrimeProbeProber(hier, core, [pool.lines_for(hier.l2_set(a, core), geo.ways - 1) for a in paddrs],
                             timer_, rng)
        p.reset()
        p.calibrate()
        return p
    raise ValueError(f"unknown primitive {kind!r}")


def cmd_probe(args) -> int:
    sc = load_scenario(args.scenario or "probe", "probe")
    prof = _profile(args, sc)
    hier = Hierarchy(prof, derive(args.seed, "hierarchy"))
    rng = rng_for(args.seed, "probe")
    lib = EventLibrary.from_dict(sc["library"])
    victim_space, attacker = _processes(prof, args.seed, "victim", "attacker")
    vcore, acore = sc.get("victim_core", 1), sc.get("attacker_core", 0)
    victim = EventVictim(hier, vcore, victim_space, lib)
    amap = attacker.map_shared(lib.obj, lib.size)
    targets = sc["targets"]
    vaddrs = [amap.virtual_base + lib.offsets[a] for a in targets]
    kind = args.primitive or sc.get("primitive", "fr")
    if kind in ("er", "pp"):
        # congruence needs the physical addresses
        try:
            paddrs = [attacker.pagemap_query(v) for v in vaddrs]
        except PagemapDenied as e:
            raise NoPhysicalOracle("no physical oracle: " + str(e)) from e
    else:
        paddrs = [attacker.translate(v) for v in vaddrs]
    prober = _prober(kind, hier, attacker, paddrs, _timer(args, sc), rng, acore, vcore,
                     EvictionStrategy(**sc.get("strategy", {"N": 21, "A": 1, "D": 6})))
    if kind != "pp":
        prober.reset()
    sched = Scheduler(seed=derive(args.seed, "scheduler"))
    sched.add(victim)
    for ev in sc["events"]:
        victim.schedule(trigger_event(lib, ev["kind"], int(ev["t"]), text=ev.get("text")))
    traces, _ = monitor(prober, int(args.duration or sc["duration"]), sched)
    rows = []
    for tr in traces:
        for t, k, h in zip(tr.timestamps, tr.ticks, tr.hits):
            rows.append((t, targets[tr.target_id], k, "hit" if h else "miss"))
    rows.sort()
    write_csv(args.out, ["timestamp_cycles", "target_id", "ticks", "class"], rows)
    print(f"{len(rows)} samples, {sum(r[3] == 'hit' for r in rows)} hits")
    return 0


def cmd_covert(args) -> int:
    sc = load_scenario(args.scenario or "covert", "covert")
    prof = _profile(args, sc)
    prim = args.primitive or sc.get("primitive", "flush_reload")
    prim = COVERT_ALIASES.get(prim, prim)
    if args.payload:
        payload = Path(args.payload).read_bytes()
    else:
        payload = rng_for(args.seed, "payload").integers(0, 256, sc.get("payload_bytes", 1024),
                                                          dtype=np.uint8).tobytes()
    cfg = ChannelConfig(sc.get("n", 32), sc.get("s", 8), sc.get("c", 16), sc.get("x", 8), primitive=prim)
    hier = Hierarchy(prof, derive(args.seed, "hierarchy"))
    link = CacheLink(hier, cfg, _timer(args, sc), rng_for(args.seed, "link"),
                     sc.get("sender_core", 0), sc.get("receiver_core", 1), space_seed=derive(args.seed, "memory"))
    mode = args.link
    if mode == "auto":
        mode = "model" if len(payload) > sc.get("model_above_bytes", 16384) else "cache"
    noise = args.noise if args.noise is not None else 0.0
    limit = sc.get("max_attempts", 64)
    if mode == "model":
        model = LinkModel.fit(link, sc.get("fit_rounds", 400))
        st = transmit(payload, ModelLink(model, link.cfg, derive(args.seed, "model")), noise, max_attempts=limit)
    else:
        st = transmit(payload, link, noise, rng_for(args.seed, "noise"), max_attempts=limit)
    row = st.row()
    write_csv(args.out, list(row), [list(row.values())])
    intact = st.delivered == payload
    print(f"{mode} link: {st.bits_delivered} bits in {st.cycles} cycles, "
          f"{st.bandwidth:.2f} bits/Mcycle, payload {'intact' if intact else 'CORRUPTED'}")
    return 0


def cmd_template(args) -> int:
    sc = load_scenario(args.scenario or "template-libinput", "template")
    prof = _profile(args, sc)
    hier = Hierarchy(prof, derive(args.seed, "hierarchy"))
    lib = EventLibrary.from_dict(sc["library"])
    bench = TemplateBench(hier, lib, _timer(args, sc), rng_for(args.seed, "template"),
                          sc.get("attacker_core", 0), sc.get("victim_core", 1), derive(args.seed, "memory"))
    pr = sc["profiling"]
    m = profile(bench, pr["events"], int(args.duration or pr["duration"]), pr.get("spacing", 600_000))
    rows = sorted(((lib.offsets[a], e, h) for a, e, h in m.rows()), key=lambda r: (r[0], r[1]))
    rows = [(f"{a:#x}", e, h) for a, e, h in rows]
    write_csv(args.out, ["address", "event", "hits"], rows)
    print(f"{len(m.addresses)} addresses x {len(m.events)} events")
    return 0


def cmd_aes(args) -> int:
    sc = load_scenario(args.scenario or "aes", "aes")
    prof = _profile(args, sc)
    mode = args.mode or sc.get("mode", "shared")
    prim = args.primitive or ("pp" if mode == "private" else sc.get("primitive", "er"))
    budget = args.budget or sc.get("budget", 512)
    rng = rng_for(args.seed, "aes")
    hier = Hierarchy(prof, derive(args.seed, "hierarchy"))
    vspace, aspace = _processes(prof, args.seed, "victim", "attacker")
    key = rng_for(args.seed, "key").integers(0, 256, 16, dtype=np.uint8).tobytes()
    d = sc.get("disalignment", "random")
    d = random_disalignment(rng_for(args.seed, "disalignment")) if d == "random" else int(d)
    victim = TTableAES(hier, vspace, key, mode=mode, core=sc.get("victim_core", 1), disalignment=d)
    attack = AESAttack(hier, victim, aspace, prim, _timer(args, sc), rng, sc.get("attacker_core", 0),
                       EvictionStrategy(**sc.get("strategy", {"N": 21, "A": 1, "D": 6})),
                       sc.get("lines_per_table", 2), sc.get("locate_rounds", 24))
    est = aes_recover_upper_nibbles(attack, budget, sc.get("margin_floor", 0.01))
    rows = [(e.byte_index, "" if e.nibble is None else e.nibble, f"{e.margin:.6f}",
             int(e.nibble == key[e.byte_index] >> 4)) for e in est]
    write_csv(args.out, ["byte_index", "nibble", "margin", "correct"], rows)
    print(f"{mode}/{prim}, disalignment {d}, budget {budget}: {sum(r[3] for r in rows)}/16 nibbles correct")
    return 0


def cmd_tz(args) -> int:
    sc = load_scenario(args.scenario or "tz-spy", "trustlet")
    prof = _profile(args, sc)
    runs = args.runs or 1
    inv = args.trials or sc.get("invocations", 20)
    flush = args.flush or sc.get("flush_on_enter", False)
    lo, hi = sc.get("band", [250, 320])
    rows = []
    for r in range(runs):
        s = derive(args.seed, f"tz-run-{r}")
        hier = Hierarchy(prof, s)
        (aspace,) = _processes(prof, s, "attacker")
        tl = Trustlet(hier, core=sc.get("victim_core", 1), flush_on_enter=flush, band=(lo, hi),
                      lines_per_set=sc.get("lines_per_set", 3), loops=sc.get("loops", 4),
                      prefix_sets=tuple(sc.get("prefix_sets", (40, 41, 42, 43))), key_id=f"key-{r}", seed=s)
        spy = TrustletSpy(tl, aspace, _timer(args, sc), np.random.default_rng(s), sc.get("attacker_core", 0))
        res = mse_profile(spy.set_profile(True, inv), spy.set_profile(False, inv))
        rows.extend((r, i, f"{v:.6f}") for i, v in enumerate(res.per_set))
        print(f"run {r}: {res.fraction_in(lo, hi):.4f} of squared error in sets {lo}-{hi}")
    write_csv(args.out, ["run", "set", "squared_error"], rows)
    return 0


def cmd_histogram(args) -> int:
    sc = load_scenario(args.scenario, "histogram") if args.scenario else {}
    prof = _profile(args, sc)
    t = _timer(args, sc)
    rng = rng_for(args.seed, "histogram")
    n = args.trials or 10_000
    if args.kind == "flush":
        if not prof.flush_available:
            raise UnsupportedOperation(f"{prof.name} has no unprivileged flush")
        h = Hierarchy(prof, derive(args.seed, "hierarchy"))
        lines = (1 << 20) + prof.line_size * np.arange(n)
        unc = h.flush_many(0, lines)
        h.touch_many(args.victim_core, lines)
        cac = h.flush_many(0, lines)
        classes = {"cached": t.observe(cac, rng), "uncached": t.observe(unc, rng)}
    else:
        s = latency_samples(prof, t, rng, 0, args.victim_core, n, derive(args.seed, "hierarchy"))
        classes = {k: v[1] for k, v in s.items()}
    width = args.bin or max(t.granularity, 1)
    allv = np.concatenate(list(classes.values()))
    lo = float(np.floor(allv.min() / width) * width)
    rows = []
    for name in sorted(classes):
        hist = Histogram.of(classes[name], width, lo, float(allv.max()) + width)
        for e, c in zip(hist.edges[:-1], hist.counts):
            if c:
                rows.append((name, f"{e:g}", int(c)))
    write_csv(args.out, ["class", "bin_start", "count"], rows)
    print(" ".join(f"{k}: mean {v.mean():.1f}" for k, v in sorted(classes.items())))
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="armcache", description="ARM cache attack simulator")
    ap.add_argument("--version", action="version", version=f"armcache {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, required=True, help="seed for every random choice")
        p.add_argument("--out", required=True, help="output CSV")
        p.add_argument("--profile", help="shipped profile name or JSON path")
        p.add_argument("--scenario", help="shipped scenario name or JSON path")
        p.add_argument("--timer", choices=sorted(PRESETS))
        p.add_argument("--trials", type=int)
        p.add_argument("--pagemap-restricted", action="store_true",
                       help="deny virtual-to-physical translation")
        return p

    p = common(sub.add_parser("evict", help="search eviction strategies"))
    p.add_argument("--grid", help="e.g. N=16..24,A=1..4,D=1..6")
    p.set_defaults(fn=cmd_evict)

    p = common(sub.add_parser("probe", help="monitor victim lines and dump the trace"))
    p.add_argument("--primitive", choices=["fr", "er", "pp", "ff"])
    p.add_argument("--duration", type=int)
    p.set_defaults(fn=cmd_probe)

    p = common(sub.add_parser("covert", help="send a payload over the covert channel"))
    p.add_argument("--primitive", choices=sorted(COVERT_ALIASES) + sorted(COVERT_ALIASES.values()))
    p.add_argument("--payload", help="file to send (default: random bytes)")
    p.add_argument("--noise", type=float, help="per-bit flip probability")
    p.add_argument("--link", choices=["auto", "cache", "model"], default="auto")
    p.set_defaults(fn=cmd_covert)

    p = common(sub.add_parser("template", help="build a cache template matrix"))
    p.add_argument("--duration", type=int, help="profiling cycles per event")
    p.set_defaults(fn=cmd_template)

    p = common(sub.add_parser("aes-attack", help="recover upper key nibbles of T-table AES"))
    p.add_argument("--mode", choices=["shared", "private"])
    p.add_argument("--primitive", choices=["er", "fr", "pp"])
    p.add_argument("--budget", type=int, help="encryptions per key byte")
    p.set_defaults(fn=cmd_aes)

    p = common(sub.add_parser("tz-spy", help="profile a trustlet's L2 sets"))
    p.add_argument("--runs", type=int)
    p.add_argument("--flush", action="store_true", help="trustlet flushes caches on world switch")
    p.set_defaults(fn=cmd_tz)

    p = common(sub.add_parser("histogram", help="hit/miss timing histograms"))
    p.add_argument("--kind", choices=["reload", "flush"], default="reload")
    p.add_argument("--bin", type=float, help="bin width in ticks")
    p.add_argument("--victim-core", type=int, default=1)
    p.set_defaults(fn=cmd_histogram)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except MODULE_ERRORS as e:
        print(f"armcache {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except (ScenarioError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"armcache {args.command}: invalid configuration: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
