import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from armcache.analysis import (AmbiguousTemplate, MonitoredLine, SetProfile, TemplateBench, TemplateMatrix,
                               classify_events, decide_nibbles, disalignment_report, hit_runs, line_coverage,
                               monitored_lines, mse_profile, profile)
from armcache.attacks import MonitorTrace
from armcache.cachesim import Hierarchy
from armcache.timing import timer
from armcache.victims import EventLibrary, trigger_event


# -- AES line coverage --------------------------------------------------------

@pytest.mark.parametrize("j", range(1, 16))
def test_aligned_line_covers_one_class(j):
    cov = line_coverage(0, 0, j)
    assert cov[j] == 16 and cov.sum() == 16


def test_offset_four_splits_fifteen_one():
    cov = line_coverage(4, 0, 5)
    # entries 16*5-1 .. 16*5+14
    assert cov[4] == 1 and cov[5] == 15 and cov.sum() == 16


def test_offset_thirty_two_splits_evenly():
    cov = line_coverage(32, 0, 5)
    assert cov[4] == 8 and cov[5] == 8


def test_coverage_of_other_tables_shifts_by_sixteen_lines():
    assert np.array_equal(line_coverage(8, 2, 37), line_coverage(8, 0, 5))


@pytest.mark.parametrize("d,split", [(0, (16, 0)), (4, (15, 1)), (32, (8, 8)), (60, (15, 1))])
def test_disalignment_report(d, split):
    r = disalignment_report(d)
    assert r.offset == d and set(r.boundary_splits) == {split}


def test_monitored_lines_skip_straddling_line():
    ml = monitored_lines(0, 2)
    assert [(m.table, m.line) for m in ml] == [(t, 16 * t + k) for t in range(4) for k in (1, 2)]


def _synthetic_hits(key, pts, lines, d):
    """Hit iff byte i's first-round lookup lands in the monitored line (no noise)."""
    hits = np.zeros((len(pts), len(lines)), dtype=bool)
    for m, ml in enumerate(lines):
        for i in range(ml.table, 16, 4):
            x = pts[:, i] ^ key[i]
            off = d + 1024 * ml.table + 4 * x.astype(int)
            hits[:, m] |= off // 64 == ml.line
    return hits


@pytest.mark.parametrize("d", [0, 4, 32])
def test_decide_nibbles_recovers_key_from_clean_hits(d, rng):
    key = rng.integers(0, 256, 16, dtype=np.uint8)
    pts = rng.integers(0, 256, (4000, 16), dtype=np.uint8)
    lines = monitored_lines(d, 2)
    est = decide_nibbles(pts, _synthetic_hits(key, pts, lines, d), lines)
    assert [e.nibble for e in est] == [int(k) >> 4 for k in key]


def test_zero_key_gives_zero_nibbles(rng):
    key = np.zeros(16, dtype=np.uint8)
    pts = rng.integers(0, 256, (2000, 16), dtype=np.uint8)
    lines = monitored_lines(0, 1)
    assert all(e.nibble == 0 for e in decide_nibbles(pts, _synthetic_hits(key, pts, lines, 0), lines))


def test_aligned_margin_is_class_gap(rng):
    # one aligned line; class-mean gap is 1 between the hit class and the rest
    key = np.zeros(16, dtype=np.uint8)
    pts = rng.integers(0, 256, (3000, 16), dtype=np.uint8)
    lines = [MonitoredLine(0, 1, line_coverage(0, 0, 1))]
    hits = (pts[:, 0:1] >> 4) == 1
    est = decide_nibbles(pts, hits, lines)[0]
    assert est.nibble == 0 and est.margin == pytest.approx(1.0)


def test_no_signal_stays_below_floor(rng):
    pts = rng.integers(0, 256, (500, 16), dtype=np.uint8)
    lines = monitored_lines(0, 2)
    est = decide_nibbles(pts, np.zeros((500, len(lines)), dtype=bool), lines)
    assert all(e.nibble is None and e.margin == 0 for e in est)


# -- MSE --------------------------------------------------------------------

def test_mse_profile_example():
    r = mse_profile(SetProfile(np.array([0., 1., 2., 0.])), SetProfile(np.array([0., 0., 0., 0.])))
    assert r.total == pytest.approx(5 / 4) and r.per_set.tolist() == [0, 1, 4, 0]
    assert r.fraction_in(1, 2) == 1.0 and r.fraction_in(0, 1) == pytest.approx(0.2)


def test_mse_length_mismatch():
    with pytest.raises(ValueError):
        mse_profile(SetProfile(np.zeros(3)), SetProfile(np.zeros(4)))


# probe scores are averaged counts; a 1/64 grid keeps squares clear of underflow
vec = arrays(np.float64, 32, elements=st.integers(0, 64 * 64).map(lambda k: k / 64))


@settings(max_examples=100, deadline=None)
@given(vec, vec)
def test_mse_symmetric_and_zero_iff_equal(a, b):
    ab, ba = mse_profile(SetProfile(a), SetProfile(b)), mse_profile(SetProfile(b), SetProfile(a))
    assert ab.total == ba.total and ab.total >= 0
    assert mse_profile(SetProfile(a), SetProfile(a)).total == 0
    assert (ab.total == 0) == bool(np.all(a == b))


# -- templates ----------------------------------------------------------------

def _matrix(cols, events):
    return TemplateMatrix(list(range(len(cols[0]))), events, np.array(cols).T)


def test_identical_columns_are_ambiguous():
    with pytest.raises(AmbiguousTemplate):
        _matrix([[1, 2, 0], [2, 4, 0]], ["a", "b"]).check_distinguishable()
    with pytest.raises(AmbiguousTemplate):
        _matrix([[0, 0], [0, 0]], ["a", "b"]).check_distinguishable()
    _matrix([[1, 0, 0], [0, 1, 0], [0, 0, 0]], ["a", "b", "idle"]).check_distinguishable()


def test_classify_empty_trace():
    m = _matrix([[5, 0], [0, 5]], ["a", "b"])
    assert classify_events(m, [MonitorTrace(0), MonitorTrace(1)]) == []


def test_classify_picks_the_closest_column():
    m = _matrix([[9, 1, 0], [0, 1, 9]], ["a", "b"])
    traces = [MonitorTrace(i) for i in range(3)]
    for k in range(5):
        traces[2].append(1000 + 10 * k, 10, True)
        traces[0].append(10**7 + 10 * k, 10, True)
    got = classify_events(m, traces, merge_gap=1000)
    assert [e.kind for e in got] == ["b", "a"]


def test_hit_runs():
    tr = MonitorTrace(0)
    for k, h in enumerate([1, 1, 0, 1, 1, 1, 0, 1]):
        tr.append(k, 10, bool(h))
    assert hit_runs(tr, 0, 8) == 3 and hit_runs(tr, 0, 2) == 2 and hit_runs(tr, 6, 8) == 1


def test_single_address_event_fills_one_cell(galaxy, rng):
    lib = EventLibrary.from_dict({
        "addresses": 4,
        "footprints": {"poke": {"addresses": [2], "burst": 1, "period": 50_000, "duration": 200_000},
                       "nudge": {"addresses": [0, 1], "burst": 1, "period": 50_000, "duration": 200_000}}})
    bench = TemplateBench(Hierarchy(galaxy, 3), lib, timer("register"), rng)
    m = profile(bench, ["poke", "nudge", None], 400_000, 200_000)
    assert m.events == ["poke", "nudge", "idle"]
    assert m.hits[2, 0] > 0 and np.count_nonzero(m.hits[:, 0]) == 1
    assert not m.column("idle").any()
    m.check_distinguishable()



def _overlaps(lo, hi, gaps):
    return any(g0 < hi and lo < g1 for g0, g1 in gaps)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_gaps_only_drop_events_inside_them(seed):
    from armcache.cachesim import load_profile
    from armcache.scenarios import load_scenario
    sc = load_scenario("template-libinput", "template")
    lib = EventLibrary.from_dict(sc["library"])
    pr, rp = sc["profiling"], sc["replay"]
    rng = np.random.default_rng(seed)
    bench = TemplateBench(Hierarchy(load_profile(sc["profile"]), seed), lib, timer(sc["timer"]), rng,
                          space_seed=seed, gap_probability=0.05)
    matrix = profile(bench, pr["events"], pr["duration"], pr["spacing"])
    kinds = sorted(lib.footprints)
    t0 = bench.sched.now + 100_000
    acts = [trigger_event(lib, kinds[i], t0 + j * rp["spacing"])
            for j, i in enumerate(rng.integers(0, len(kinds), 40))]
    traces, gaps = bench.run(acts, 40 * rp["spacing"] + 200_000)
    detected = classify_events(matrix, traces, rp["merge_gap"])
    assert gaps, "no descheduling happened"
    clear = 0
    for a in acts:
        if _overlaps(a.start, a.end + 50_000, gaps):
            continue
        clear += 1
        m = [d for d in detected if a.start <= d.start <= a.end + 50_000]
        assert [d.kind for d in m] == [a.kind], (a, m)
    assert clear >= 10


def test_nibble_estimates_are_sound_at_default_budget():
    from armcache.analysis import AESAttack, aes_recover_upper_nibbles
    from armcache.cachesim import load_profile
    from armcache.eviction import EvictionStrategy
    from armcache.memspace import PhysicalMemory, ProcessSpace
    from armcache.scenarios import load_scenario
    from armcache.victims import TTableAES, random_disalignment
    sc = load_scenario("aes", "aes")
    prof = load_profile(sc["profile"])
    sound, returned = 0, 0
    for k in range(100):
        seed = 5000 + k
        rng = np.random.default_rng(seed)
        h, mem = Hierarchy(prof, seed), PhysicalMemory(prof.physical_memory, seed=seed)
        key = rng.integers(0, 256, 16, dtype=np.uint8).tobytes()
        victim = TTableAES(h, ProcessSpace("victim", mem), key, mode="shared",
                           disalignment=random_disalignment(rng))
        attack = AESAttack(h, victim, ProcessSpace("attacker", mem), "er", timer(sc["timer"]), rng,
                           strategy=EvictionStrategy(**sc["strategy"]), lines_per_table=sc["lines_per_table"],
                           locate_rounds=sc["locate_rounds"])
        est = aes_recover_upper_nibbles(attack, sc["budget"], sc["margin_floor"])
        given_ = [(e.nibble, b >> 4) for e, b in zip(est, key) if e.nibble is not None]
        returned += len(given_)
        sound += all(n == t for n, t in given_)
    assert sound >= 99, sound
    assert returned > 0
