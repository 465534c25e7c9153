import math

import numpy as np
import pytest

from wdmqkd.channel import ChannelState, PropagatedPulse
from wdmqkd.core import Basis, LinkConfig, Polarization
from wdmqkd.receiver import (
    DARK, ClockModel, DetectionEvent, apply_dead_time, dark_events, decode_event, decode_slot,
    decode_timestamps, earliest_per_round, export_detections_csv, inject_dark_counts, load_detections_csv,
    measure_batch, measure_round,
)
from wdmqkd.simulation import simulate_exact, simulate_sparse, true_clock

IDEAL = dict(dark_rate=0.0, dead_time=0.0, jitter_sigma=0.0, residual_misalignment=0.0)


def test_slot_decoding_is_a_bijection():
    cells = {decode_slot(s) for s in range(4)}
    assert cells == {(Basis.K, 0), (Basis.K, 1), (Basis.C, 0), (Basis.C, 1)}
    assert decode_slot(Polarization.L) == (Basis.K, 0)
    assert decode_slot(Polarization.A) == (Basis.C, 1)


def test_ideal_projective_statistics(rng):
    cfg = LinkConfig("x", detector_efficiency=1.0, p_key_rx=0.5)
    n = 200_000
    slot = measure_batch(np.full(n, Polarization.L, np.int8), np.ones(n, np.int64), 0.0, 0.0, cfg, rng)
    assert np.all(slot >= 0)
    key = slot < 2
    assert np.all(slot[key] == Polarization.L)
    c = slot[~key]
    assert np.mean(c == Polarization.D) == pytest.approx(0.5, abs=0.01)
    assert not np.any(slot == Polarization.R)


def test_measure_round_ideal(rng):
    cfg = LinkConfig("x", detector_efficiency=1.0, p_key_rx=1.0)
    pulse = PropagatedPulse(survivors=2, state=int(Polarization.R), error_k=0.0, error_c=0.0)
    assert all(measure_round(pulse, cfg, rng) == Polarization.R for _ in range(100))
    assert measure_round(PropagatedPulse(0, 0, 0.0, 0.0), cfg, rng) is None


def test_detection_efficiency(rng):
    cfg = LinkConfig("x", detector_efficiency=0.15)
    n = 1_000_000
    slot = measure_batch(np.zeros(n, np.int8), np.ones(n, np.int64), 0.0, 0.0, cfg, rng)
    frac = np.mean(slot >= 0)
    assert abs(frac - 0.15) < 5 * math.sqrt(0.15 * 0.85 / n)


def test_earliest_slot_wins(rng):
    cfg = LinkConfig("x", detector_efficiency=1.0, p_key_rx=1.0)
    # D sent, key basis measured: outcomes L and R random; with many photons L (slot 0) dominates
    slot = measure_batch(np.full(20_000, Polarization.D, np.int8), np.full(20_000, 8), 0.0, 0.0, cfg, rng)
    assert np.mean(slot == Polarization.L) == pytest.approx(1 - 0.5**8, abs=0.01)


def test_full_chain_click_probability():
    cfg = LinkConfig("x", p_mu=1.0, channel_loss_db=14, dwdm_loss_db=1, receiver_loss_db=0, **IDEAL)
    ch = ChannelState.initial(cfg)
    rng = np.random.default_rng(3)
    clicks = rounds = 0
    for k in range(5):
        stream, _ = simulate_exact(cfg, ch, k * 2_000_000, 2_000_000, rng)
        clicks += len(stream)
        rounds += 2_000_000
    expected = 1 - math.exp(-0.6 * 0.00474)
    assert expected == pytest.approx(0.00284, rel=0.01)
    assert clicks / rounds == pytest.approx(expected, rel=0.02)


def test_sparse_matches_exact_click_rate():
    cfg = LinkConfig("x", channel_loss_db=5, dark_rate=0.0, dead_time=0.0)
    ch = ChannelState.initial(cfg, theta=0.1)
    n = 2_000_000
    exact, _ = simulate_exact(cfg, ch, 0, n, np.random.default_rng(1))
    sparse = simulate_sparse(cfg, ch, 0, n, np.random.default_rng(2))
    assert len(sparse) == pytest.approx(len(exact), rel=0.05)
    for name in ("slot", "intensity"):
        a = np.bincount(getattr(exact, name), minlength=4) / len(exact)
        b = np.bincount(getattr(sparse, name), minlength=4) / len(sparse)
        assert np.allclose(a, b, atol=0.02)


def test_dark_counts_examples(rng):
    r, s, ph = inject_dark_counts(10.0, 0.0, rng)
    assert len(r) == 0
    r, s, ph = inject_dark_counts(10.0, 2000.0, rng)
    assert abs(len(r) - 20_000) < 5 * math.sqrt(20_000)
    assert np.all((ph >= -0.5) & (ph < 0.5))
    assert set(np.unique(s)) <= {0, 1, 2, 3}
    with pytest.raises(ValueError):
        inject_dark_counts(-1.0, 10.0, rng)


def test_dark_only_stream_has_half_errors():
    cfg = LinkConfig("x", dark_rate=500_000.0, dead_time=0.0, channel_loss_db=200.0)
    ch = ChannelState.initial(cfg)
    stream, rb = simulate_exact(cfg, ch, 0, 5_000_000, np.random.default_rng(4))
    assert np.all(stream.origin == DARK)
    clock = true_clock(cfg)
    rounds, slots, ok = decode_timestamps(stream.timestamp, clock, cfg.window_halfwidth)
    tx_state = rb.state[rounds[ok]]
    rx = slots[ok]
    match = (rx >= 2) == (tx_state >= 2)
    errors = (rx[match] & 1) != (tx_state[match] & 1)
    assert len(errors) > 10_000
    assert errors.mean() == pytest.approx(0.5, abs=0.02)


def test_decode_exact_slot_centre():
    clock = ClockModel(period=20e-9)
    t = float(clock.slot_time(42, Polarization.R))
    ev = DetectionEvent(t, "1550", Polarization.R)
    assert decode_event(ev, clock) == (42, Basis.K, 1)


def test_decode_rejects_outside_window():
    clock = ClockModel(period=20e-9)
    t = float(clock.slot_time(42, Polarization.R)) + 1.5e-9
    assert decode_event(DetectionEvent(t, "1550", Polarization.R), clock, 1e-9) is None


def test_uniform_timestamps_acceptance_fraction(rng):
    clock = ClockModel(period=20e-9)
    w = 1e-9
    t = rng.uniform(0, 1e-3, 1_000_000)
    _, _, ok = decode_timestamps(t, clock, w)
    assert ok.mean() == pytest.approx(4 * 2 * w * 50e6, rel=0.01)


def test_noiseless_stream_has_zero_qber():
    cfg = LinkConfig("x", channel_loss_db=0, receiver_loss_db=0, **IDEAL)
    stream, rb = simulate_exact(cfg, ChannelState.initial(cfg), 0, 500_000, np.random.default_rng(5))
    rounds, slots, ok = decode_timestamps(stream.timestamp, true_clock(cfg), cfg.window_halfwidth)
    assert ok.all()
    assert np.array_equal(rounds, stream.true_round)
    tx = rb.state[rounds]
    match = (slots >= 2) == (tx >= 2)
    assert match.sum() > 1000
    assert np.all((slots[match] & 1) == (tx[match] & 1))


def test_dead_time_semantics():
    t = np.array([0.0, 0.5, 1.0, 1.2, 2.1, 2.15, 5.0])
    keep, blind = apply_dead_time(t, 1.0)
    assert keep.tolist() == [True, False, True, False, True, False, True]
    assert blind == 6.0
    keep, _ = apply_dead_time(t, 1.0, blind_until=1.1)
    assert keep.tolist() == [False, False, False, True, False, False, True]
    keep, _ = apply_dead_time(t, 0.0)
    assert keep.all()


def test_dead_time_monotone(rng):
    t = np.sort(rng.uniform(0, 1.0, 20_000))
    kept = [apply_dead_time(t, d)[0].sum() for d in (0.0, 1e-6, 1e-5, 1e-4, 1e-3)]
    assert all(a >= b for a, b in zip(kept, kept[1:]))


def test_dead_time_monotone_full_chain():
    cfg0 = LinkConfig("x", channel_loss_db=0.0)
    counts = []
    for d in (0.0, 1e-6, 1e-5, 1e-4):
        cfg = LinkConfig("x", channel_loss_db=0.0, dead_time=d)
        stream, _ = simulate_exact(cfg, ChannelState.initial(cfg0), 0, 1_000_000, np.random.default_rng(9))
        counts.append(len(stream))
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_earliest_per_round_mask():
    r = np.array([1, 1, 2, 3, 3, 3])
    s = np.array([0, 2, 1, 1, 2, 3])
    assert earliest_per_round(r, s).tolist() == [True, False, True, True, False, False]


def test_detection_csv_round_trip(tmp_path):
    cfg = LinkConfig("1550", channel_loss_db=0.0)
    stream, _ = simulate_exact(cfg, ChannelState.initial(cfg), 0, 100_000, np.random.default_rng(1))
    path = tmp_path / "det.csv"
    export_detections_csv(stream, path)
    assert path.read_text().splitlines()[0] == "timestamp_ns,wavelength_label,slot"
    ts, labels, slots = load_detections_csv(path)
    assert np.allclose(ts, stream.timestamp, rtol=0, atol=1e-15)
    assert set(labels) == {"1550"}
    assert np.array_equal(slots, stream.slot)


def test_dark_events_objects(rng):
    evs = dark_events(1.0, 1000.0, rng, label="1310")
    assert all(e.origin == DARK and e.wavelength_label == "1310" for e in evs)
    assert abs(len(evs) - 1000) < 5 * math.sqrt(1000)
