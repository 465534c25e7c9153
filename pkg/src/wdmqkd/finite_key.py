"""Finite-key secret key length for the one-decoy protocol.

Tallies come as ``[basis, intensity]`` arrays (basis 0 = K, 1 = C;
intensity 0 = mu, 1 = nu). Every Hoeffding adjustment uses the same
failure probability ``eps1``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import binary_entropy
from .hashing import toeplitz_hash

ESTIMATE_LOG_COLUMNS = ["block_id", "s_K0", "s_K1", "phi_K", "lambda_EC", "lambda_c", "lambda_sec", "skl"]
_MIN_GAP = 1e-9


class DegenerateIntensities(ValueError):
    pass


class InsufficientStatistics(ArithmeticError):
    pass


@dataclass(frozen=True)
class DecoyParameters:
    mu: float = 0.6
    nu: float = 0.17
    p_mu: float = 0.5
    eps_sec: float = 1e-10
    eps1: float | None = None

    @property
    def p_nu(self) -> float:
        return 1.0 - self.p_mu

    @property
    def eps_hoeffding(self) -> float:
        return self.eps_sec if self.eps1 is None else self.eps1

    def check(self) -> None:
        if self.mu - self.nu < _MIN_GAP:
            raise DegenerateIntensities(f"need mu > nu, got mu={self.mu}, nu={self.nu}")


@dataclass(frozen=True)
class FiniteKeyEstimate:
    s_K0_lower: float
    s_K1_lower: float
    phi_K_upper: float
    lambda_EC: int
    lambda_c: int
    lambda_sec: float
    skl: int
    n_K: int = 0
    s_K0_upper: float = 0.0
    s_C1_lower: float = 0.0
    v_C1_upper: float = 0.0

    def log_row(self, block_id: int) -> list:
        return [block_id, self.s_K0_lower, self.s_K1_lower, self.phi_K_upper,
                self.lambda_EC, self.lambda_c, self.lambda_sec, self.skl]


def tau(n: int, p_mu: float, mu: float, nu: float) -> float:
    """Probability that a pulse carries exactly ``n`` photons."""
    if n < 0:
        raise ValueError("photon number must be >= 0")
    out = 0.0
    for p, k in ((p_mu, mu), (1.0 - p_mu, nu)):
        if p == 0:
            continue
        # k**0 == 1 also for k == 0
        out += p * math.exp(-k) * k**n / math.factorial(n)
    return out


def hoeffding_delta(total: float, eps1: float) -> float:
    return math.sqrt(total / 2.0 * math.log(1.0 / eps1))


def finite_bound_counts(n_Bk, n_B_total, p_k, k, eps1):
    """``(lower, upper)`` of ``e^k / p_k * (n_Bk -+ delta)``; lower clamped at 0."""
    d = hoeffding_delta(n_B_total, eps1)
    f = math.exp(k) / p_k
    return max(0.0, f * (n_Bk - d)), f * (n_Bk + d)


def _adjusted(counts, p: DecoyParameters):
    """``(minus, plus)`` per intensity for one basis' counts ``[n_mu, n_nu]``."""
    total = float(counts[0]) + float(counts[1])
    mu_l, mu_u = finite_bound_counts(float(counts[0]), total, p.p_mu, p.mu, p.eps_hoeffding)
    nu_l, nu_u = finite_bound_counts(float(counts[1]), total, p.p_nu, p.nu, p.eps_hoeffding)
    return (mu_l, nu_l), (mu_u, nu_u)


def _clamp(x, hi):
    return min(max(x, 0.0), float(hi))


def bound_vacuum(n_B, m_B, p: DecoyParameters) -> tuple[float, float]:
    """Lower and upper bounds on vacuum-origin detections in one basis.

    The upper bound uses the errors of the decoy class: vacuum contributions
    err half of the time, so ``s0 <= 2 tau0 m+_nu``.
    """
    p.check()
    nb = int(n_B[0]) + int(n_B[1])
    if nb == 0:
        return 0.0, 0.0
    t0 = tau(0, p.p_mu, p.mu, p.nu)
    (_, n_nu_m), (n_mu_p, _) = _adjusted(n_B, p)
    lower = t0 * (p.mu * n_nu_m - p.nu * n_mu_p) / (p.mu - p.nu)
    _, (_, m_nu_p) = _adjusted(m_B, p)
    upper = 2.0 * t0 * m_nu_p
    return _clamp(lower, nb), _clamp(upper, nb)


def bound_single_photon(n_B, s_B0_upper: float, p: DecoyParameters) -> float:
    p.check()
    nb = int(n_B[0]) + int(n_B[1])
    if nb == 0:
        return 0.0
    t0 = tau(0, p.p_mu, p.mu, p.nu)
    t1 = tau(1, p.p_mu, p.mu, p.nu)
    mu, nu = p.mu, p.nu
    (_, n_nu_m), (n_mu_p, _) = _adjusted(n_B, p)
    val = t1 * mu / (nu * (mu - nu)) * (
        n_nu_m - (nu**2 / mu**2) * n_mu_p - ((mu**2 - nu**2) / mu**2) * (s_B0_upper / t0)
    )
    return _clamp(val, nb)


def bound_single_photon_errors(m_C, n_C_total: int, p: DecoyParameters) -> float:
    """Upper bound on single-photon errors in the check basis."""
    p.check()
    t1 = tau(1, p.p_mu, p.mu, p.nu)
    (_, m_nu_m), (m_mu_p, _) = _adjusted(m_C, p)
    return _clamp(t1 * (m_mu_p - m_nu_m) / (p.mu - p.nu), n_C_total)


def gamma(a: float, b: float, c: float, d: float) -> float:
    """Random-sampling correction between a sample of size c and a population of size d."""
    if c <= 0 or d <= 0:
        raise InsufficientStatistics("sampling correction needs c, d > 0")
    # with almost no observed errors b(1-b) understates the spread; floor b at
    # ln(1/a)/c, which keeps the correction conservative against the exact
    # hypergeometric tail and leaves realistic samples untouched
    floor = min(0.5, math.log(1.0 / a) / c)
    b = min(max(b, floor), 1.0 - floor)
    v = b * (1.0 - b)
    arg = (c + d) / (c * d * v) * (21.0**2 / a**2)
    if arg <= 1.0:
        return 0.0
    return math.sqrt((c + d) * v / (c * d * math.log(2.0)) * math.log2(arg))


def bound_phase_error(s_K1_lower: float, s_C1_lower: float, v_C1_upper: float, eps_sec: float) -> float:
    if s_C1_lower <= 0 or s_K1_lower <= 0:
        raise InsufficientStatistics("no single-photon detections to bound the phase error")
    ratio = v_C1_upper / s_C1_lower
    phi = ratio + gamma(eps_sec, ratio, s_C1_lower, s_K1_lower)
    return min(max(phi, 0.0), 0.5)


def lambda_sec(eps_sec: float) -> float:
    return 6.0 * math.log2(19.0 / eps_sec)


def secret_key_length(s_K0: float, s_K1: float, phi_K: float, lambda_EC: float, lambda_c: float, eps_sec: float) -> int:
    raw = s_K0 + s_K1 * (1.0 - binary_entropy(phi_K)) - lambda_EC - lambda_c - lambda_sec(eps_sec)
    return max(0, math.floor(raw))


def estimate(n, m, lambda_EC: int, lambda_c: int, params: DecoyParameters) -> FiniteKeyEstimate:
    """Full per-block estimate from ``[basis, intensity]`` tallies."""
    n = np.asarray(n, dtype=np.int64)
    m = np.asarray(m, dtype=np.int64)
    n_K = int(n[0].sum())
    s_K0, s_K0u = bound_vacuum(n[0], m[0], params)
    s_K1 = bound_single_photon(n[0], s_K0u, params)
    _, s_C0u = bound_vacuum(n[1], m[1], params)
    s_C1 = bound_single_photon(n[1], s_C0u, params)
    v_C1 = bound_single_photon_errors(m[1], int(n[1].sum()), params)
    try:
        phi = bound_phase_error(s_K1, s_C1, v_C1, params.eps_sec)
        skl = secret_key_length(s_K0, s_K1, phi, lambda_EC, lambda_c, params.eps_sec)
    except InsufficientStatistics:
        phi, skl = 0.5, 0
    skl = min(skl, n_K)
    return FiniteKeyEstimate(
        s_K0_lower=s_K0, s_K1_lower=s_K1, phi_K_upper=phi, lambda_EC=int(lambda_EC),
        lambda_c=int(lambda_c), lambda_sec=lambda_sec(params.eps_sec), skl=skl,
        n_K=n_K, s_K0_upper=s_K0u, s_C1_lower=s_C1, v_C1_upper=v_C1,
    )


def privacy_amplify(corrected_bits, skl: int, seed) -> np.ndarray:
    """Toeplitz-hash the corrected key down to ``skl`` bits."""
    bits = np.asarray(corrected_bits, dtype=np.uint8)
    if skl > len(bits):
        raise ValueError(f"skl {skl} exceeds key length {len(bits)}")
    if skl == 0:
        return np.empty(0, np.uint8)
    return toeplitz_hash(bits, seed, skl)


def pa_seed(n_bits: int, skl: int, seed: int, block_id: int = 0) -> np.ndarray:
    """Public Toeplitz seed both ends derive from a shared integer."""
    rng = np.random.default_rng([seed, block_id, 0x9A])
    return rng.integers(0, 2, size=max(n_bits + skl - 1, 0), dtype=np.uint8)


def write_estimate_log(rows, path: str | Path) -> None:
    """``rows`` are ``(block_id, FiniteKeyEstimate)`` pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ESTIMATE_LOG_COLUMNS)
        for bid, est in rows:
            w.writerow(est.log_row(bid))


def as_dict(est: FiniteKeyEstimate) -> dict:
    return asdict(est)
