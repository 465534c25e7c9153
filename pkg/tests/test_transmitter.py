import math

import numpy as np
import pytest
from scipy import stats

from wdmqkd.core import Basis, Intensity, LinkConfig, Polarization
from wdmqkd.transmitter import (
    dump_rounds_csv, generate_round, generate_rounds, load_rounds_csv, poisson_cdf_table, vacuum_fraction,
)


def test_vacuum_fraction_examples():
    assert vacuum_fraction(0.0) == 1.0
    assert vacuum_fraction(0.6) == pytest.approx(0.5488, abs=1e-4)
    assert vacuum_fraction(0.17) == pytest.approx(0.8437, abs=1e-4)
    with pytest.raises(ValueError):
        vacuum_fraction(-0.1)


def test_full_key_bias_sends_only_key_states(rng):
    cfg = LinkConfig("1550", p_key_tx=1.0)
    rb = generate_rounds(0, 100_000, cfg, rng)
    assert set(np.unique(rb.state)) <= {Polarization.L, Polarization.R}
    assert np.all(rb.basis == Basis.K)


def test_basis_state_pairing_and_no_antidiagonal(rng, link):
    rb = generate_rounds(0, 200_000, link, rng)
    assert not np.any(rb.state == Polarization.A)
    assert np.array_equal(rb.state == Polarization.D, rb.basis == Basis.C)
    for i in range(0, 200, 7):
        r = rb.record(i)
        assert r.basis == r.state.basis


def test_signal_mean_photon_number(rng, link):
    rb = generate_rounds(0, 1_000_000, link, rng)
    sig = rb.photon_count[rb.intensity == Intensity.SIGNAL]
    sigma = math.sqrt(link.mu / len(sig))
    assert abs(sig.mean() - link.mu) < 3 * sigma


def test_decoy_fraction(rng, link):
    rb = generate_rounds(0, 1_000_000, link, rng)
    assert np.mean(rb.intensity == Intensity.DECOY) == pytest.approx(0.5, abs=0.002)


def test_state_frequencies_multinomial(rng, link):
    n = 1_000_000
    rb = generate_rounds(0, n, link, rng)
    expected = np.array([link.p_key_tx / 2, link.p_key_tx / 2, 1 - link.p_key_tx])
    observed = np.bincount(rb.state, minlength=3)[:3] / n
    sigma = np.sqrt(expected * (1 - expected) / n)
    assert np.all(np.abs(observed - expected) < 5 * sigma)


@pytest.mark.parametrize("intensity", [Intensity.SIGNAL, Intensity.DECOY])
def test_photon_histogram_is_poisson(rng, link, intensity):
    rb = generate_rounds(0, 1_000_000, link, rng)
    counts = rb.photon_count[rb.intensity == intensity]
    mean = link.mu if intensity == Intensity.SIGNAL else link.nu
    k_max = 3
    obs = np.array([np.sum(counts == k) for k in range(k_max)] + [np.sum(counts >= k_max)])
    pmf = stats.poisson.pmf(np.arange(k_max), mean)
    exp = len(counts) * np.append(pmf, 1 - pmf.sum())
    _, p = stats.chisquare(obs, exp)
    assert p > 1e-3


def test_batched_equals_sequential(link):
    a = np.random.default_rng(7)
    b = np.random.default_rng(7)
    batch = generate_rounds(100, 50, link, a)
    for i in range(50):
        assert generate_round(100 + i, link, b) == batch.record(i)


def test_poisson_table_is_a_cdf():
    cdf = poisson_cdf_table(0.6)
    assert cdf[-1] == 1.0
    assert np.all(np.diff(cdf) >= 0)
    assert cdf[0] == pytest.approx(math.exp(-0.6))


def test_round_dump_round_trip(tmp_path, rng, link):
    rb = generate_rounds(0, 500, link, rng)
    path = tmp_path / "rounds.csv"
    dump_rounds_csv(rb, path)
    assert path.read_text().splitlines()[0] == "round_index,intensity,state,photon_count"
    back = load_rounds_csv(path)
    for col in ("round_index", "intensity", "state", "photon_count"):
        assert np.array_equal(getattr(back, col), getattr(rb, col))
