import numpy as np
import pytest

from wdmqkd.core import Basis, LinkConfig, Polarization
from wdmqkd.sifting import (
    BLOCK_LOG_COLUMNS, SiftedBlock, Sifter, TransmitterLedger, hashed_uniforms, qber, sift, write_block_log,
)
from wdmqkd.transmitter import generate_rounds


def synthetic(rng, n_rounds, flip, p_rx=0.9, p_click=0.3, cfg=None):
    """Round truth plus decoded clicks with a fixed in-basis flip probability."""
    cfg = cfg or LinkConfig("x")
    rb = generate_rounds(0, n_rounds, cfg, rng)
    rounds = np.flatnonzero(rng.random(n_rounds) < p_click)
    tx = rb.state[rounds]
    rx_key = rng.random(len(rounds)) < p_rx
    same = rx_key == (tx < 2)
    bit = np.where(same, (tx & 1) ^ (rng.random(len(rounds)) < flip), rng.random(len(rounds)) < 0.5)
    slot = np.where(rx_key, bit, 2 + bit).astype(np.int8)
    return rb, rounds, slot


def test_noiseless_blocks_have_no_errors(rng):
    rb, rounds, slot = synthetic(rng, 400_000, 0.0)
    blocks, _ = sift(rb.state, rb.intensity, rb.photon_count, rounds, slot, 20_000)
    assert blocks
    for b in blocks:
        assert not b.m.any()
        assert np.array_equal(b.bits_tx, b.bits_rx)


def test_injected_flip_rate_is_measured(rng):
    rb, rounds, slot = synthetic(rng, 8_000_000, 0.011, p_click=0.5)
    blocks, _ = sift(rb.state, rb.intensity, rb.photon_count, rounds, slot, 2_000_000)
    assert len(blocks) == 1
    assert qber(blocks[0], Basis.K) == pytest.approx(0.011, abs=5e-4)
    assert qber(blocks[0], Basis.C) == pytest.approx(0.011, abs=3e-3)


def test_keep_rate_matches_basis_match_probability(rng):
    rb, rounds, slot = synthetic(rng, 2_000_000, 0.0)
    blocks, sifter = sift(rb.state, rb.intensity, rb.photon_count, rounds, slot, 10**9)
    n_tot, _ = sifter.partial_tallies()
    assert n_tot.sum() / len(rounds) == pytest.approx(0.9**2 + 0.1**2, rel=0.01)


def _block(n, m):
    return SiftedBlock(0, 0, 0, np.empty(0, np.uint8), np.empty(0, np.uint8), np.array(n), np.array(m))


def test_qber_examples():
    assert qber(_block([[10, 0], [5, 5]], [[0, 0], [0, 0]]), Basis.K) == 0.0
    assert qber(_block([[2_500_000, 2_500_000], [1, 1]], [[30_000, 25_000], [0, 0]]), Basis.K) == pytest.approx(0.011)
    assert qber(_block([[1, 1], [600, 400]], [[0, 0], [16, 10]]), Basis.C) == pytest.approx(0.026)
    with pytest.raises(ZeroDivisionError):
        qber(_block([[0, 0], [1, 0]], [[0, 0], [0, 0]]), Basis.K)


def test_block_invariants(rng):
    rb, rounds, slot = synthetic(rng, 1_000_000, 0.02)
    size = 30_000
    blocks, sifter = sift(rb.state, rb.intensity, rb.photon_count, rounds, slot, size, first_round=100)
    assert len(blocks) >= 5
    prev_end = 99
    for b in blocks:
        assert b.start_round == prev_end + 1
        prev_end = b.end_round
        assert b.n_K == size == len(b.bits_tx) == len(b.bits_rx)
        assert np.all(b.m <= b.n)
        assert int(b.m[0].sum()) == int(np.count_nonzero(b.bits_tx != b.bits_rx))
        assert b.kept + b.mismatched + b.undetected == b.end_round - b.start_round + 1
        # tallies are over exactly this block's rounds
        sel = (rounds >= b.start_round) & (rounds <= b.end_round)
        tx = rb.state[rounds[sel]]
        match = (slot[sel] >= 2) == (tx >= 2)
        assert b.kept == int(match.sum()) == int(b.n.sum())
    assert sifter.dropped == int(np.sum(rounds < 100))


def test_truth_tallies_count_photon_numbers(rng):
    rb, rounds, slot = synthetic(rng, 500_000, 0.0)
    blocks, _ = sift(rb.state, rb.intensity, rb.photon_count, rounds, slot, 50_000)
    b = blocks[0]
    sel = rounds <= b.end_round
    tx = rb.state[rounds[sel]]
    k_match = (slot[sel] < 2) & (tx < 2)
    assert b.truth["s0"][0] == int(np.sum(k_match & (rb.photon_count[rounds[sel]] == 0)))
    assert b.truth["s1"][0] == int(np.sum(k_match & (rb.photon_count[rounds[sel]] == 1)))


def test_incremental_feed_equals_whole(rng):
    rb, rounds, slot = synthetic(rng, 600_000, 0.03)
    whole, _ = sift(rb.state, rb.intensity, rb.photon_count, rounds, slot, 25_000)
    sifter = Sifter(25_000)
    parts = []
    for chunk in np.array_split(np.arange(len(rounds)), 17):
        r = rounds[chunk]
        parts += sifter.feed(r, slot[chunk], rb.intensity[r], rb.state[r], rb.photon_count[r])
    assert [b.log_row() for b in parts] == [b.log_row() for b in whole]
    for a, b in zip(parts, whole):
        assert np.array_equal(a.bits_rx, b.bits_rx)


def test_feed_requires_increasing_rounds():
    with pytest.raises(ValueError):
        Sifter(10).feed(np.array([3, 2]), np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2))


def test_transmitter_ledger_records_and_fills(link):
    led = TransmitterLedger(link)
    led.record(np.array([10, 5]), np.array([1, 0]), np.array([2, 1]), np.array([0, 3]))
    i, s, p = led.lookup(np.array([5, 10]))
    assert i.tolist() == [0, 1] and s.tolist() == [1, 2] and p.tolist() == [3, 0]
    i2, s2, p2 = led.lookup(np.arange(1000, 200_000))
    assert not np.any(s2 == Polarization.A)
    assert np.mean(s2 == Polarization.D) == pytest.approx(0.1, abs=0.01)
    # idle rounds are a deterministic function of seed and round
    assert np.array_equal(led.lookup(np.arange(1000, 1100))[1], s2[:100])
    assert np.array_equal(led.public_states(50), led.lookup(np.arange(50))[1])


def test_hashed_uniforms_are_uniform():
    u = hashed_uniforms(3, np.arange(200_000), 4)
    assert u.shape == (200_000, 4)
    assert np.all((u >= 0) & (u < 1))
    assert np.allclose(u.mean(axis=0), 0.5, atol=0.005)
    assert not np.array_equal(hashed_uniforms(4, np.arange(10), 1), hashed_uniforms(3, np.arange(10), 1))


def test_block_log_schema(tmp_path, rng):
    rb, rounds, slot = synthetic(rng, 200_000, 0.01)
    blocks, _ = sift(rb.state, rb.intensity, rb.photon_count, rounds, slot, 10_000)
    path = tmp_path / "blocks.csv"
    write_block_log(blocks, path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == BLOCK_LOG_COLUMNS == [
        "block_id", "start_round", "end_round", "n_K_mu", "n_K_nu", "m_K_mu", "m_K_nu",
        "n_C_mu", "n_C_nu", "m_C_mu", "m_C_nu"]
    assert len(lines) == len(blocks) + 1
