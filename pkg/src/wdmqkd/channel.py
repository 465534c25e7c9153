"""Fiber and dWDM transmittance, polarization drift, and channel propagation.

Wavelength is routing metadata only: no computation here depends on the
link label, which is what lets one broadband receiver serve every channel.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .core import Basis, LinkConfig, db_to_transmittance
from .transmitter import RoundRecord


def effective_transmittance(cfg: LinkConfig) -> float:
    """Channel plus dWDM transmittance; detector efficiency is not included."""
    return db_to_transmittance(cfg.channel_loss_db + cfg.dwdm_loss_db)


def error_probability(angle: float) -> float:
    return math.sin(angle) ** 2


@dataclass(frozen=True)
class ChannelState:
    """Slowly varying polarization rotation of one link."""

    theta: float
    last_update: float
    total_transmittance: float
    residual_misalignment: float = 0.0
    basis_offset_k: float = 0.0
    basis_offset_c: float = 0.0

    @classmethod
    def initial(cls, cfg: LinkConfig, theta: float = 0.0, t: float = 0.0) -> "ChannelState":
        return cls(
            theta=theta,
            last_update=t,
            total_transmittance=cfg.total_transmittance,
            residual_misalignment=cfg.residual_misalignment,
            basis_offset_k=cfg.basis_offset_k,
            basis_offset_c=cfg.basis_offset_c,
        )

    def error_probs(self) -> tuple[float, float]:
        """Bit-flip probability in the key and check basis."""
        base = self.theta + self.residual_misalignment
        return (
            error_probability(base + self.basis_offset_k),
            error_probability(base + self.basis_offset_c),
        )


@dataclass(frozen=True)
class PropagatedPulse:
    survivors: int
    state: int
    error_k: float
    error_c: float

    def error_in(self, basis: Basis) -> float:
        return self.error_k if basis == Basis.K else self.error_c


def propagate_round(record: RoundRecord, ch: ChannelState, rng: np.random.Generator) -> PropagatedPulse:
    """Binomially thin the emitted photons and attach the rotation error."""
    if record.photon_count < 0:
        raise ValueError("photon_count must be >= 0")
    survivors = int(rng.binomial(record.photon_count, ch.total_transmittance)) if record.photon_count else 0
    ek, ec = ch.error_probs()
    return PropagatedPulse(survivors, int(record.state), ek, ec)


def propagate_counts(photon_count: np.ndarray, ch: ChannelState, rng: np.random.Generator) -> np.ndarray:
    return rng.binomial(photon_count, ch.total_transmittance)


def advance_drift(
    ch: ChannelState,
    dt: float,
    cfg: LinkConfig,
    rng: np.random.Generator,
    last_qber_c: float | None = None,
) -> ChannelState:
    """Random-walk the rotation angle over ``dt`` seconds.

    With active control enabled and a check-basis QBER above threshold, the
    angle is first re-aligned to a fresh draw of the alignment residual.
    """
    if dt < 0:
        raise ValueError("dt must be >= 0")
    theta = ch.theta
    if cfg.active_control and last_qber_c is not None and last_qber_c > cfg.qber_threshold:
        theta = recalibrate_angle(cfg, rng)
    if cfg.drift_sigma > 0 and dt > 0:
        theta += rng.normal(0.0, cfg.drift_sigma * math.sqrt(dt))
    return dataclasses.replace(ch, theta=theta, last_update=ch.last_update + dt)


def recalibrate_angle(cfg: LinkConfig, rng: np.random.Generator) -> float:
    return float(rng.normal(0.0, cfg.alignment_sigma)) if cfg.alignment_sigma > 0 else 0.0


def recalibrate(ch: ChannelState, cfg: LinkConfig, rng: np.random.Generator) -> ChannelState:
    return dataclasses.replace(ch, theta=recalibrate_angle(cfg, rng))


def expected_qber_with_drift(residual: float, drift_sigma: float, t: float) -> float:
    """Ensemble-mean flip probability after ``t`` seconds of free drift.

    For a Gaussian angle of variance s^2 centred on ``residual``,
    E[sin^2] = (1 - cos(2 residual) exp(-2 s^2)) / 2.
    """
    return 0.5 * (1.0 - math.cos(2.0 * residual) * math.exp(-2.0 * drift_sigma**2 * t))
