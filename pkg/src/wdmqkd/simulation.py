"""Link front end: transmitter -> channel -> receiver as detection streams.

Two samplers produce the same :class:`~wdmqkd.receiver.DetectionStream`:

``simulate_exact``
    Draws every round with :func:`~wdmqkd.transmitter.generate_rounds`,
    thins photons through the channel and measures each survivor. Cost is
    linear in the number of pulses.

``simulate_sparse``
    Samples only rounds that will click. A Poisson pulse of mean k thinned
    by detection probability p splits into independent Poisson(k p)
    detected and Poisson(k (1 - p)) undetected photons, so clicking rounds
    form a Bernoulli process over rounds and the emitted photon number of a
    clicking round is (zero-truncated detected) + (undetected). Cost is
    linear in the number of clicks, which makes multi-hour sessions cheap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import ChannelState
from .core import Intensity, LinkConfig, Polarization
from .receiver import (
    DARK, PHOTON, ClockModel, DetectionStream, apply_dead_time, earliest_per_round, inject_dark_counts,
    measure_batch,
)
from .transmitter import RoundBatch, generate_rounds, poisson_cdf_table, poisson_from_uniform


def true_clock(cfg: LinkConfig) -> ClockModel:
    """Transmitter clock as seen on the receiver's time axis."""
    return ClockModel(period=1.0 / (cfg.pulse_rate * (1.0 + 1e-6 * cfg.clock_skew_ppm)), offset=cfg.clock_offset)


@dataclass
class DetectorState:
    blind_until: float = -math.inf


def _timestamps(cfg, rounds, position, rng):
    clock = true_clock(cfg)
    t = clock.offset + rounds * clock.period + position * clock.slot_width
    if cfg.jitter_sigma > 0:
        t = t + rng.normal(0.0, cfg.jitter_sigma, size=len(t))
    return t


def _merge_order(key_a: np.ndarray, key_b: np.ndarray) -> np.ndarray:
    """Stable merge permutation of two sorted key arrays (``a`` wins ties)."""
    out = np.empty(len(key_a) + len(key_b), np.int64)
    out[np.arange(len(key_a)) + np.searchsorted(key_b, key_a, side="left")] = np.arange(len(key_a))
    out[np.arange(len(key_b)) + np.searchsorted(key_a, key_b, side="right")] = len(key_a) + np.arange(len(key_b))
    return out


def _finish(cfg, rounds, slots, phase, origin, intensity, state, photons, rng, det, n_sorted):
    """Same-round and dead-time rules, then timestamps.

    The first ``n_sorted`` entries and the rest are each sorted by
    (round, position); they are merged rather than re-sorted.
    """
    position = slots + phase
    if len(rounds):
        key = (rounds - rounds.min()) * 4.0 + position
        idx = _merge_order(key[:n_sorted], key[n_sorted:])
    else:
        idx = np.empty(0, np.int64)
    r = rounds[idx]
    idx = idx[earliest_per_round(r, slots[idx])]
    t = _timestamps(cfg, rounds[idx], position[idx], rng)
    keep, det.blind_until = apply_dead_time(t, cfg.dead_time, det.blind_until)
    idx = idx[keep]
    return DetectionStream(
        timestamp=t[keep], slot=slots[idx].astype(np.int8), true_round=rounds[idx],
        origin=origin[idx].astype(np.int8), intensity=intensity[idx].astype(np.int8),
        state=state[idx].astype(np.int8), photon_count=photons[idx].astype(np.int64),
        wavelength_label=cfg.wavelength_label,
    )


def _dark(cfg, start, n_rounds, rng):
    period = true_clock(cfg).period
    return inject_dark_counts(n_rounds * period, cfg.dark_rate, rng, 1.0 / period, start)


def simulate_exact(
    cfg: LinkConfig,
    ch: ChannelState,
    start: int,
    n_rounds: int,
    rng: np.random.Generator,
    det: DetectorState | None = None,
) -> tuple[DetectionStream, RoundBatch]:
    """Pulse-by-pulse simulation; also returns the full round truth."""
    det = det if det is not None else DetectorState()
    rb = generate_rounds(start, n_rounds, cfg, rng)
    survivors = rng.binomial(rb.photon_count, ch.total_transmittance)
    ek, ec = ch.error_probs()
    slot = measure_batch(rb.state, survivors, ek, ec, cfg, rng)
    hit = np.flatnonzero(slot >= 0)
    d_rounds, d_slots, d_phase = _dark(cfg, start, n_rounds, rng)
    d_idx = d_rounds - start
    rounds = np.concatenate([rb.round_index[hit], d_rounds])
    slots = np.concatenate([slot[hit], d_slots])
    phase = np.concatenate([np.zeros(len(hit)), d_phase])
    origin = np.concatenate([np.full(len(hit), PHOTON, np.int8), np.full(len(d_rounds), DARK, np.int8)])
    src = np.concatenate([hit, d_idx])
    stream = _finish(
        cfg, rounds, slots, phase, origin, rb.intensity[src], rb.state[src], rb.photon_count[src], rng, det, len(hit))
    return stream, rb


def click_parameters(cfg: LinkConfig, ch: ChannelState) -> dict:
    """Per-intensity detection probability per photon and click probabilities."""
    p = ch.total_transmittance * cfg.detector_efficiency
    a_mu = -math.expm1(-cfg.mu * p)
    a_nu = -math.expm1(-cfg.nu * p)
    return {"p_det": p, "a_mu": a_mu, "a_nu": a_nu, "q": cfg.p_mu * a_mu + cfg.p_nu * a_nu}


def _sample_states(n, cfg, rng):
    u = rng.random((n, 2))
    key = u[:, 0] < cfg.p_key_tx
    return np.where(key, np.where(u[:, 1] < 0.5, Polarization.L, Polarization.R), Polarization.D).astype(np.int8)


def _active_rounds(q, start, n_rounds, rng):
    if q <= 0 or n_rounds == 0:
        return np.empty(0, np.int64)
    parts = []
    pos = start - 1
    end = start + n_rounds
    while True:
        expect = (end - pos) * q
        size = int(expect + 6 * math.sqrt(expect) + 16)
        gaps = rng.geometric(q, size=size)
        cand = pos + np.cumsum(gaps, dtype=np.int64)
        parts.append(cand[cand < end])
        if cand[-1] >= end:
            break
        pos = int(cand[-1])
    return np.concatenate(parts)


def simulate_sparse(
    cfg: LinkConfig,
    ch: ChannelState,
    start: int,
    n_rounds: int,
    rng: np.random.Generator,
    det: DetectorState | None = None,
) -> DetectionStream:
    """Click-driven simulation, statistically identical to :func:`simulate_exact`."""
    det = det if det is not None else DetectorState()
    cp = click_parameters(cfg, ch)
    p, q = cp["p_det"], cp["q"]
    rounds = _active_rounds(q, start, n_rounds, rng)
    n = len(rounds)
    signal = rng.random(n) < cfg.p_mu * cp["a_mu"] / q if n else np.zeros(0, bool)
    # zero-truncated Poisson by inverse CDF on (P0, 1)
    u = rng.random(n)
    detected = np.empty(n, np.int64)
    for is_sig, k in ((True, cfg.mu * p), (False, cfg.nu * p)):
        m = signal == is_sig
        cdf = poisson_cdf_table(k)
        p0 = cdf[0]
        detected[m] = poisson_from_uniform(p0 + u[m] * (1.0 - p0), cdf)
    detected = np.maximum(detected, 1)
    undetected = rng.poisson(np.where(signal, cfg.mu, cfg.nu) * (1.0 - p)) if n else np.zeros(0, np.int64)
    state = _sample_states(n, cfg, rng)
    ek, ec = ch.error_probs()
    slot = measure_batch(state, detected, ek, ec, cfg, rng, efficiency=1.0)
    intensity = np.where(signal, Intensity.SIGNAL, Intensity.DECOY).astype(np.int8)
    photons = detected + undetected

    d_rounds, d_slots, d_phase = _dark(cfg, start, n_rounds, rng)
    nd = len(d_rounds)
    # dark clicks in otherwise idle rounds need their own (non-clicking) truth
    pos = np.searchsorted(rounds, d_rounds)
    pos_c = np.minimum(pos, max(n - 1, 0))
    shared = (pos < n) & (rounds[pos_c] == d_rounds) if n else np.zeros(nd, bool)
    idle_sig_p = cfg.p_mu * (1.0 - cp["a_mu"]) / (1.0 - q)
    d_signal = rng.random(nd) < idle_sig_p
    d_int = np.where(d_signal, Intensity.SIGNAL, Intensity.DECOY).astype(np.int8)
    d_photons = rng.poisson(np.where(d_signal, cfg.mu, cfg.nu) * (1.0 - p)) if nd else np.zeros(0, np.int64)
    d_state = _sample_states(nd, cfg, rng)
    if shared.any():
        d_int[shared] = intensity[pos_c[shared]]
        d_photons[shared] = photons[pos_c[shared]]
        d_state[shared] = state[pos_c[shared]]
    # repeated dark clicks in one idle round share truth with the first of them
    if nd > 1:
        order = np.argsort(d_rounds, kind="stable")
        sr = d_rounds[order]
        dup = np.flatnonzero(sr[1:] == sr[:-1]) + 1
        for i in dup:
            a, b = order[i - 1], order[i]
            d_int[b], d_photons[b], d_state[b] = d_int[a], d_photons[a], d_state[a]

    all_rounds = np.concatenate([rounds, d_rounds])
    all_slots = np.concatenate([slot, d_slots])
    all_phase = np.concatenate([np.zeros(n), d_phase])
    origin = np.concatenate([np.full(n, PHOTON, np.int8), np.full(nd, DARK, np.int8)])
    return _finish(
        cfg, all_rounds, all_slots, all_phase, origin,
        np.concatenate([intensity, d_int]), np.concatenate([state, d_state]),
        np.concatenate([photons, d_photons]), rng, det, n,
    )
