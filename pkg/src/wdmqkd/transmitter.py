"""Per-round transmitter truth for three-state decoy BB84.

Each round consumes exactly four uniforms from the link generator, in a
fixed order (intensity, basis, state, photon number), so generating a
batch of rounds is bit-identical to generating them one at a time.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Basis, Intensity, LinkConfig, Polarization

UNIFORMS_PER_ROUND = 4


def vacuum_fraction(mean: float) -> float:
    """Probability that a Poissonian pulse of the given mean is empty."""
    if mean < 0 or math.isnan(mean):
        raise ValueError(f"mean photon number must be >= 0, got {mean!r}")
    return math.exp(-mean)


def poisson_cdf_table(mean: float, tail: float = 1e-17) -> np.ndarray:
    """Cumulative Poisson probabilities up to where the tail drops below ``tail``."""
    probs = [math.exp(-mean)]
    n = 0
    while 1.0 - sum(probs) > tail and n < 200:
        n += 1
        probs.append(probs[-1] * mean / n)
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return cdf


def poisson_from_uniform(u: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    return np.searchsorted(cdf, u, side="right").astype(np.int64)


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    intensity: Intensity
    state: Polarization
    basis: Basis
    photon_count: int


@dataclass
class RoundBatch:
    """Column-oriented block of consecutive :class:`RoundRecord` values."""

    round_index: np.ndarray  # int64
    intensity: np.ndarray    # int8, Intensity values
    state: np.ndarray        # int8, Polarization values
    photon_count: np.ndarray  # int64

    @property
    def basis(self) -> np.ndarray:
        return (self.state >= Polarization.D).astype(np.int8)

    def __len__(self) -> int:
        return len(self.round_index)

    def record(self, i: int) -> RoundRecord:
        st = Polarization(int(self.state[i]))
        return RoundRecord(
            round_index=int(self.round_index[i]),
            intensity=Intensity(int(self.intensity[i])),
            state=st,
            basis=st.basis,
            photon_count=int(self.photon_count[i]),
        )

    def mean_of(self, cfg: LinkConfig) -> np.ndarray:
        return np.where(self.intensity == Intensity.SIGNAL, cfg.mu, cfg.nu)


def rounds_from_uniforms(start: int, u: np.ndarray, cfg: LinkConfig) -> RoundBatch:
    """Map a ``(count, 4)`` array of uniforms to rounds."""
    signal = u[:, 0] < cfg.p_mu
    key = u[:, 1] < cfg.p_key_tx
    state = np.where(key, np.where(u[:, 2] < 0.5, Polarization.L, Polarization.R), Polarization.D)
    photons = np.where(
        signal,
        poisson_from_uniform(u[:, 3], poisson_cdf_table(cfg.mu)),
        poisson_from_uniform(u[:, 3], poisson_cdf_table(cfg.nu)),
    )
    return RoundBatch(
        round_index=np.arange(start, start + len(u), dtype=np.int64),
        intensity=np.where(signal, Intensity.SIGNAL, Intensity.DECOY).astype(np.int8),
        state=state.astype(np.int8),
        photon_count=photons,
    )


def generate_rounds(start: int, count: int, cfg: LinkConfig, rng: np.random.Generator) -> RoundBatch:
    return rounds_from_uniforms(start, rng.random((count, UNIFORMS_PER_ROUND)), cfg)


def generate_round(round_index: int, cfg: LinkConfig, rng: np.random.Generator) -> RoundRecord:
    """Draw one round: intensity, basis, state and emitted photon number."""
    return generate_rounds(round_index, 1, cfg, rng).record(0)


def dump_rounds_csv(batch: RoundBatch, path: str | Path) -> None:
    """Write round truth as ``round_index,intensity,state,photon_count``."""
    names = {Intensity.SIGNAL: "mu", Intensity.DECOY: "nu"}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round_index", "intensity", "state", "photon_count"])
        for i in range(len(batch)):
            w.writerow([
                int(batch.round_index[i]),
                names[Intensity(int(batch.intensity[i]))],
                Polarization(int(batch.state[i])).name,
                int(batch.photon_count[i]),
            ])


def load_rounds_csv(path: str | Path) -> RoundBatch:
    codes = {"mu": Intensity.SIGNAL, "nu": Intensity.DECOY}
    rows = list(csv.DictReader(open(path, newline="")))
    return RoundBatch(
        round_index=np.array([int(r["round_index"]) for r in rows], dtype=np.int64),
        intensity=np.array([codes[r["intensity"]] for r in rows], dtype=np.int8),
        state=np.array([Polarization[r["state"]] for r in rows], dtype=np.int8),
        photon_count=np.array([int(r["photon_count"]) for r in rows], dtype=np.int64),
    )
