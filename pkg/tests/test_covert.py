import binascii
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from armcache.cachesim import Hierarchy
from armcache.covert import (CacheLink, ChannelConfig, ChannelSetupError, ChannelStalled, LinearChecksum,
                             LinkModel, ModelLink, Packet, Receiver, ack_bits, check_set_disjoint, checksum,
                             crc16, frames, from_bits, parse_ack, receive_packet, segment, send_packet,
                             to_bits, transmit, undetected_rate, weight_distribution)
from armcache.eviction import NoPhysicalOracle
from armcache.timing import timer


@pytest.fixture(scope="module")
def fr_link(request):
    from armcache.cachesim import load_profile
    return CacheLink(Hierarchy(load_profile("galaxy-s6"), 1), ChannelConfig(), timer("register"),
                     np.random.default_rng(7))


# -- checksum -------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.binary(min_size=0, max_size=24))
def test_crc16_matches_ccitt_false(data):
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    assert crc16(bits) == binascii.crc_hqx(data, 0xFFFF)


def test_crc16_check_value():
    assert crc16(np.unpackbits(np.frombuffer(b"123456789", dtype=np.uint8))) == 0x29B1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=64), st.integers(1, 16))
def test_checksum_fits_width(bits, c):
    assert 0 <= checksum(bits, c) < 2 ** c


def test_checksum_width_bounds():
    for c in (0, 17):
        with pytest.raises(ValueError):
            checksum([1, 0], c)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16), st.data())
def test_linear_checksum_matches_crc(width, data):
    lin = LinearChecksum.of(40, width)
    rows = np.array(data.draw(st.lists(st.lists(st.integers(0, 1), min_size=40, max_size=40),
                                       min_size=1, max_size=8)), dtype=np.uint8)
    assert lin(rows).tolist() == [checksum(r, width) for r in rows]


def test_one_bit_difference_changes_checksum(rng):
    # CRC detects every single-bit error; a Monte Carlo check at the 99% level
    same = 0
    for _ in range(2000):
        b = rng.integers(0, 2, 40).astype(np.uint8)
        b2 = b.copy()
        b2[rng.integers(40)] ^= 1
        same += checksum(b, 16) == checksum(b2, 16)
    assert same / 2000 <= 0.01


def test_bit_helpers_round_trip():
    assert from_bits(to_bits(0xA5, 8)) == 0xA5 and to_bits(5, 4).tolist() == [0, 1, 0, 1]


# -- frames and packets -----------------------------------------------------------

def test_packet_layout_msb_first():
    cfg = ChannelConfig(n=8, s=4, c=4)
    p = Packet.make(0b10110000, 3, cfg)
    b = p.bits(cfg)
    assert b[:8].tolist() == [1, 0, 1, 1, 0, 0, 0, 0] and b[8:12].tolist() == [0, 0, 1, 1]
    assert Packet.from_bits(b, cfg) == p and p.valid(cfg)
    b[0] ^= 1
    assert not Packet.from_bits(b, cfg).valid(cfg)


def test_frames_match_packets():
    cfg = ChannelConfig()
    payload = bytes(range(40))
    fr = frames(payload, cfg)
    seg = segment(payload, cfg.n)
    for k in (0, 3, fr.shape[0] - 1):
        assert fr[k].tolist() == Packet.make(from_bits(seg[k]), k, cfg).bits(cfg).tolist()


def test_segment_pads_last_row():
    rows = segment(b"\xff" * 5, 32)
    assert rows.shape == (2, 32) and rows[1, :8].all() and not rows[1, 8:].any()
    with pytest.raises(ValueError):
        segment(b"", 32)


def test_ack_round_trip_and_corruption():
    cfg = ChannelConfig()
    a = ack_bits(200, cfg)
    assert parse_ack(a, cfg) == 200
    a[0] ^= 1
    assert parse_ack(a, cfg) is None


def test_config_validation():
    with pytest.raises(ValueError):
        ChannelConfig(c=17)
    with pytest.raises(ValueError):
        ChannelConfig(primitive="prime_probe")
    with pytest.raises(ValueError):
        ChannelConfig(bit_addresses=(0, 64))


# -- receiver -----------------------------------------------------------------

def test_receiver_delivers_in_order_and_reacks_duplicates():
    cfg = ChannelConfig()
    fr = frames(bytes(range(16)), cfg)
    rx = Receiver(cfg, fr.shape[0], truth=fr[:, :cfg.n])
    assert rx.accept(fr[0]) == 0 and rx.expected == 1
    assert rx.accept(fr[0]) == 0 and rx.expected == 1      # stale: re-acked, not delivered twice
    assert rx.accept(fr[2]) is None and rx.expected == 1   # ahead of order: ignored
    assert rx.accept(fr[1]) == 1 and rx.expected == 2
    assert rx.undetected == 0


def test_receiver_rejects_every_single_flip():
    cfg = ChannelConfig()
    fr = frames(b"\x5a" * 8, cfg)
    for i in range(cfg.frame_bits):
        rx = Receiver(cfg, fr.shape[0])
        b = fr[0].copy()
        b[i] ^= 1
        assert rx.accept(b) is None and not rx.last_valid and rx.expected == 0


# -- the cache link ---------------------------------------------------------------

@pytest.mark.parametrize("pattern", ["zeros", "ones", "alternating"])
def test_send_packet_touches_exactly_the_one_bits(fr_link, pattern):
    cfg = fr_link.cfg
    fr_link.rx.reset()
    bits = {"zeros": np.zeros(cfg.frame_bits), "ones": np.ones(cfg.frame_bits),
            "alternating": np.arange(cfg.frame_bits) % 2 == 0}[pattern].astype(np.uint8)
    packet = Packet.from_bits(bits, cfg)
    send_packet(fr_link, packet)
    cached = [fr_link.hier.is_cached(int(p)) for p in fr_link.fwd_paddrs]
    assert cached == bits.astype(bool).tolist()
    got, _ = receive_packet(fr_link)
    assert (got is not None) == packet.valid(cfg)


def test_receive_packet_round_trip(fr_link):
    p = Packet.make(0xDEADBEEF, 17, fr_link.cfg)
    send_packet(fr_link, p)
    got, cycles = receive_packet(fr_link)
    assert got == p and cycles > 0


def test_noiseless_payload_round_trip(fr_link, rng):
    payload = rng.integers(0, 256, 1024, dtype=np.uint8).tobytes()
    st_ = transmit(payload, fr_link, 0.0, rng)
    assert st_.delivered == payload and st_.packet_error_rate == 0 and st_.undetected_errors == 0
    assert st_.packets == 256 and st_.attempts == 256 and st_.bandwidth > 0


def test_heavy_noise_stalls(fr_link, rng):
    with pytest.raises(ChannelStalled) as e:
        transmit(b"\x00" * 16, fr_link, 0.5, rng, max_attempts=8)
    assert e.value.seq_index == 0 and e.value.attempts == 8


def test_noise_must_be_a_probability(fr_link):
    with pytest.raises(ValueError):
        transmit(b"x", fr_link, 1.5)


def test_set_disjointness_is_enforced(galaxy):
    h = Hierarchy(galaxy, 0)
    with pytest.raises(ChannelSetupError):
        check_set_disjoint([0x10000, 0x10000 + 256 * 64], h, 0)
    check_set_disjoint([0x10000, 0x10040], h, 0)
    cfg = ChannelConfig(bit_addresses=tuple([0] * 56), ack_addresses=tuple(range(0, 16 * 64, 64)))
    with pytest.raises(ChannelSetupError):
        CacheLink(h, cfg, timer("register"), np.random.default_rng(0))


def test_evict_reload_link_needs_pagemap(alcatel, rng):
    prof = alcatel.with_(pagemap_restricted=True)
    with pytest.raises(NoPhysicalOracle):
        CacheLink(Hierarchy(prof, 0), ChannelConfig(primitive="evict_reload"), timer("register"), rng)


def test_evict_reload_link_works_without_flush(alcatel, rng):
    link = CacheLink(Hierarchy(alcatel, 0), ChannelConfig(primitive="evict_reload"), timer("register"), rng)
    payload = bytes(range(64))
    st_ = transmit(payload, link, 0.0, rng)
    assert st_.delivered == payload


@pytest.mark.parametrize("noise", [0.0, 0.01, 0.03])
def test_delivery_is_exact_unless_an_error_slipped_through(fr_link, rng, noise):
    payload = rng.integers(0, 256, 256, dtype=np.uint8).tobytes()
    st_ = transmit(payload, fr_link, noise, rng)
    assert st_.delivered == payload or st_.undetected_errors > 0


# -- model link ------------------------------------------------------------------

@pytest.fixture(scope="module")
def model(fr_link):
    return LinkModel.fit(fr_link, rounds=200)


def test_fitted_model_is_a_clean_channel(model):
    assert model.q1 < 0.01 and model.q0 < 0.01
    assert model.probe1_cost.mean() < model.probe0_cost.mean()


def test_model_link_round_trip(model):
    payload = bytes(range(256)) * 8
    st_ = transmit(payload, ModelLink(model, ChannelConfig(), seed=3), 0.0)
    assert st_.delivered == payload and st_.attempts == st_.packets


def test_model_link_is_deterministic(model):
    a = transmit(b"abc" * 300, ModelLink(model, ChannelConfig(), seed=5), 0.02)
    b = transmit(b"abc" * 300, ModelLink(model, ChannelConfig(), seed=5), 0.02)
    assert a == b


def test_model_and_cache_links_agree(fr_link, model, rng):
    payload = rng.integers(0, 256, 2048, dtype=np.uint8).tobytes()
    sim = transmit(payload, fr_link, 0.01, rng)
    mod = transmit(payload, ModelLink(model, ChannelConfig(), seed=1), 0.01)
    assert abs(sim.packet_error_rate - mod.packet_error_rate) < 0.08
    assert mod.bandwidth == pytest.approx(sim.bandwidth, rel=0.15)


def test_model_link_stalls(model):
    with pytest.raises(ChannelStalled):
        transmit(b"\x00" * 64, ModelLink(model, ChannelConfig()), 0.5, max_attempts=4)


# -- undetected-error analysis -------------------------------------------------------

def _brute_weights(cfg):
    lin = LinearChecksum.of(cfg.n + cfg.s, cfg.c)
    N = cfg.n + cfg.c
    A = np.zeros(N + 1)
    for e in itertools.product((0, 1), repeat=N):
        e = np.array(e, dtype=np.uint8)
        body = np.concatenate([e[:cfg.n], np.zeros(cfg.s, dtype=np.uint8)])
        # syndrome of the error pattern: linear part of the checksum xor the checksum flips
        syn = int(lin(body)[0]) ^ lin.const ^ from_bits(e[cfg.n:])
        if e.any() and syn == 0:
            A[e.sum()] += 1
    return A


@pytest.mark.parametrize("n,c", [(6, 4), (8, 5), (10, 6)])
def test_weight_distribution_against_brute_force(n, c):
    cfg = ChannelConfig(n=n, s=2, c=c)
    assert weight_distribution(cfg).tolist() == _brute_weights(cfg).tolist()


def test_undetected_rate_matches_monte_carlo(rng):
    cfg = ChannelConfig(n=8, s=2, c=4)
    p, trials = 0.2, 40_000
    fr = frames(b"\x3c", cfg)[0]
    hits = 0
    for _ in range(trials):
        flips = (rng.random(fr.size) < p).astype(np.uint8)
        if flips.any() and Packet.from_bits(fr ^ flips, cfg).valid(cfg) and not flips[cfg.n:cfg.n + cfg.s].any():
            hits += 1
    want = undetected_rate(cfg, p)
    assert abs(hits / trials - want) < 4 * np.sqrt(want / trials)


def test_full_code_has_no_low_weight_codewords():
    A = weight_distribution(ChannelConfig())
    assert A[1:4].sum() == 0 and A[4] > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.1), st.binary(min_size=1, max_size=200))
def test_retransmission_delivers_exactly_or_stalls(model, seed, noise, payload):
    try:
        st_ = transmit(payload, ModelLink(model, ChannelConfig(), seed=seed), noise, max_attempts=256)
    except ChannelStalled:
        return
    # a mismatch is only possible through a frame the checksum let through
    assert st_.delivered == payload or st_.undetected_errors > 0


def test_undetected_count_matches_analysis():
    # narrow checksum so undetected errors are frequent enough to count
    cfg, p = ChannelConfig(c=6), 0.03
    ideal = LinkModel(0.0, 0.0, np.array([10]), np.array([40]), np.array([500]))
    payload = np.random.default_rng(0).integers(0, 256, 16384, dtype=np.uint8).tobytes()
    packets = len(payload) * 8 // cfg.n
    u, clean = undetected_rate(cfg, p), (1 - p) ** cfg.frame_bits
    # the first frame accepted as the expected one decides each packet
    want = packets * u / (clean + u)
    got = [transmit(payload, ModelLink(ideal, cfg, seed=s), p, max_attempts=1000).undetected_errors
           for s in range(10)]
    assert abs(np.mean(got) - want) < 4 * np.sqrt(want / len(got))


def test_receiver_resyncs_a_lagging_sender():
    # receiver got ahead through a corrupted seq; older valid frames are still acked
    cfg = ChannelConfig()
    fr = frames(bytes(range(32)), cfg)
    rx = Receiver(cfg, fr.shape[0])
    for k in range(4):
        rx.accept(fr[k])
    assert [rx.accept(fr[k]) for k in (1, 2, 3)] == [1, 2, 3] and rx.expected == 4
