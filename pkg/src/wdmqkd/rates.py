"""Closed-form expected tallies and key rates of a link.

Used to calibrate static misalignment against target QBERs and as a
cross-check of the simulated pipeline. Multi-photon slot competition is
neglected; at the transmittances of interest two detected photons in one
round are rare.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .channel import ChannelState, error_probability
from .core import LinkConfig, ProtocolConfig, binary_entropy
from .finite_key import DecoyParameters, estimate


@dataclass(frozen=True)
class LinkRates:
    click_rate: float      # detected clicks per second after dead time
    raw_click_rate: float  # before dead time
    sifted_key_rate: float
    qber_k: float
    qber_c: float
    block_fill_time: float
    skl: int
    skr: float
    n: np.ndarray  # expected per-block tallies [basis, intensity]
    m: np.ndarray


def expected_tally_rates(cfg: LinkConfig, error_k: float, error_c: float):
    """Per-second expected ``(n, m, raw_click_rate, click_rate)`` tallies."""
    eta = cfg.total_transmittance * cfg.detector_efficiency
    gains = (-math.expm1(-cfg.mu * eta), -math.expm1(-cfg.nu * eta))
    probs = (cfg.p_mu, cfg.p_nu)
    raw = cfg.pulse_rate * sum(p * a for p, a in zip(probs, gains)) + cfg.dark_rate
    seen = raw / (1.0 + raw * cfg.dead_time)  # non-paralyzable
    keep = seen / raw if raw > 0 else 0.0
    # dark clicks arrive uniformly in time; only those inside a slot window decode
    dark_rate = cfg.dark_rate * dark_acceptance(cfg)
    basis_p = (cfg.p_key_tx * cfg.p_key_rx, (1 - cfg.p_key_tx) * (1 - cfg.p_key_rx))
    # a dark click picks a slot uniformly, so its basis matches Alice's half the time
    dark_p = (0.5 * cfg.p_key_tx, 0.5 * (1 - cfg.p_key_tx))
    n = np.zeros((2, 2))
    m = np.zeros((2, 2))
    for b, e in enumerate((error_k, error_c)):
        for k in range(2):
            sig = cfg.pulse_rate * probs[k] * gains[k] * basis_p[b] * keep
            dark = dark_rate * probs[k] * dark_p[b] * keep
            n[b, k] = sig + dark
            m[b, k] = sig * e + 0.5 * dark
    return n, m, raw, seen


def dark_acceptance(cfg: LinkConfig) -> float:
    """Fraction of uniformly timed clicks falling inside a slot window."""
    return min(1.0, 2.0 * cfg.window_halfwidth / cfg.slot_width)


def expected_link_rates(
    cfg: LinkConfig,
    protocol: ProtocolConfig | None = None,
    efficiency: float = 1.1,
    error_k: float | None = None,
    error_c: float | None = None,
) -> LinkRates:
    """Expected steady-state rates and the SKL of an average block."""
    protocol = protocol or ProtocolConfig()
    if error_k is None or error_c is None:
        ek, ec = ChannelState.initial(cfg).error_probs()
        error_k = ek if error_k is None else error_k
        error_c = ec if error_c is None else error_c
    n, m, raw, seen = expected_tally_rates(cfg, error_k, error_c)
    sifted = float(n[0].sum())
    qk = float(m[0].sum() / sifted) if sifted else 0.0
    qc = float(m[1].sum() / n[1].sum()) if n[1].sum() else 0.0
    if sifted <= 0:
        return LinkRates(seen, raw, 0.0, qk, qc, math.inf, 0, 0.0, n, m)
    fill = protocol.block_size_sifted / sifted
    nb, mb = np.rint(n * fill), np.rint(m * fill)
    lam_ec = int(math.ceil(efficiency * protocol.block_size_sifted * binary_entropy(qk)))
    est = estimate(nb, mb, lam_ec, protocol.confirm_tag_bits, decoy_parameters(cfg, protocol))
    return LinkRates(seen, raw, sifted, qk, qc, fill, est.skl, est.skl / fill, nb, mb)


def decoy_parameters(cfg: LinkConfig, protocol: ProtocolConfig) -> DecoyParameters:
    return DecoyParameters(mu=cfg.mu, nu=cfg.nu, p_mu=cfg.p_mu, eps_sec=protocol.eps_sec)


def misalignment_for_qber(cfg: LinkConfig, target_k: float, target_c: float | None = None):
    """Static angles reproducing target QBERs once dark counts are included.

    Returns ``(residual_misalignment, basis_offset_k, basis_offset_c)``: the
    residual carries the smaller of the two angles and one basis offset the
    difference.
    """
    target_c = target_k if target_c is None else target_c

    def angle(target, basis):
        def f(a):
            e = error_probability(a)
            n, m, *_ = expected_tally_rates(cfg, e, e)
            return m[basis].sum() / n[basis].sum() - target
        if f(0.0) > 0:
            raise ValueError(f"dark counts alone exceed target QBER {target}")
        return brentq(f, 0.0, math.pi / 4, xtol=1e-12)

    ak, ac = angle(target_k, 0), angle(target_c, 1)
    base = min(ak, ac)
    return base, ak - base, ac - base
