"""Basis sifting and per-block tallies.

Tallies are indexed ``[basis, intensity]`` with basis 0 = K, 1 = C and
intensity 0 = mu, 1 = nu.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Basis, LinkConfig, Polarization
from .transmitter import poisson_cdf_table, poisson_from_uniform

BLOCK_LOG_COLUMNS = [
    "block_id", "start_round", "end_round",
    "n_K_mu", "n_K_nu", "m_K_mu", "m_K_nu", "n_C_mu", "n_C_nu", "m_C_mu", "m_C_nu",
]


@dataclass
class SiftedBlock:
    block_id: int
    start_round: int
    end_round: int
    bits_tx: np.ndarray
    bits_rx: np.ndarray
    n: np.ndarray  # int64 [basis, intensity]
    m: np.ndarray
    kept: int = 0
    mismatched: int = 0
    undetected: int = 0
    start_time: float = 0.0
    end_time: float = 0.0
    truth: dict = field(default_factory=dict)  # simulation only

    @property
    def n_K(self) -> int:
        return int(self.n[0].sum())

    @property
    def n_C(self) -> int:
        return int(self.n[1].sum())

    def log_row(self) -> list[int]:
        return [
            self.block_id, self.start_round, self.end_round,
            *(int(x) for x in self.n[0]), *(int(x) for x in self.m[0]),
            *(int(x) for x in self.n[1]), *(int(x) for x in self.m[1]),
        ]


def qber(block: SiftedBlock, basis: Basis | int) -> float:
    """Error fraction in ``basis`` summed over both intensities."""
    b = int(basis)
    n = int(block.n[b].sum())
    if n == 0:
        raise ZeroDivisionError(f"no sifted counts in basis {Basis(b).name}")
    return int(block.m[b].sum()) / n


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def hashed_uniforms(seed: int, rounds: np.ndarray, k: int) -> np.ndarray:
    """Counter-based uniforms: one independent row of ``k`` per round."""
    with np.errstate(over="ignore"):
        base = _splitmix(np.asarray(rounds, dtype=np.int64).astype(np.uint64) ^ np.uint64(seed * 0x632BE59BD9B4E019 % 2**64))
        cols = [_splitmix(base + np.uint64(j + 1)) for j in range(k)]
    return np.stack([(c >> np.uint64(11)).astype(np.float64) / 2.0**53 for c in cols], axis=1)


class TransmitterLedger:
    """Alice's view of her own rounds.

    Rounds that produced a click are recorded from the simulator; any other
    round a decoding error may point to is drawn on demand from a
    counter-based generator, as an idle round would have been.
    """

    def __init__(self, cfg: LinkConfig, idle_signal_prob: float | None = None, idle_mean_factor: float = 1.0):
        self.cfg = cfg
        self.idle_signal_prob = cfg.p_mu if idle_signal_prob is None else idle_signal_prob
        self.idle_mean_factor = idle_mean_factor
        self._rounds = np.empty(0, np.int64)
        self._int = np.empty(0, np.int8)
        self._state = np.empty(0, np.int8)
        self._photons = np.empty(0, np.int64)

    def record(self, rounds, intensity, state, photons) -> None:
        order = np.argsort(rounds, kind="stable")
        self._rounds = np.asarray(rounds)[order]
        self._int = np.asarray(intensity)[order]
        self._state = np.asarray(state)[order]
        self._photons = np.asarray(photons)[order]

    def lookup(self, rounds: np.ndarray):
        rounds = np.asarray(rounds, dtype=np.int64)
        pos = np.searchsorted(self._rounds, rounds)
        posc = np.minimum(pos, max(len(self._rounds) - 1, 0))
        hit = (pos < len(self._rounds)) & (self._rounds[posc] == rounds) if len(self._rounds) else np.zeros(len(rounds), bool)
        intensity = np.empty(len(rounds), np.int8)
        state = np.empty(len(rounds), np.int8)
        photons = np.empty(len(rounds), np.int64)
        intensity[hit], state[hit], photons[hit] = self._int[posc[hit]], self._state[posc[hit]], self._photons[posc[hit]]
        miss = ~hit
        if miss.any():
            u = hashed_uniforms(self.cfg.seed, rounds[miss], 4)
            sig = u[:, 0] < self.idle_signal_prob
            key = u[:, 1] < self.cfg.p_key_tx
            intensity[miss] = np.where(sig, 0, 1)
            state[miss] = np.where(key, np.where(u[:, 2] < 0.5, Polarization.L, Polarization.R), Polarization.D)
            f = self.idle_mean_factor
            photons[miss] = np.where(
                sig,
                poisson_from_uniform(u[:, 3], poisson_cdf_table(self.cfg.mu * f)),
                poisson_from_uniform(u[:, 3], poisson_cdf_table(self.cfg.nu * f)),
            )
        return intensity, state, photons

    def public_states(self, count: int) -> np.ndarray:
        """States of rounds ``0 .. count-1`` (the public synchronization prefix)."""
        return self.lookup(np.arange(count, dtype=np.int64))[1]


class Sifter:
    """Accumulates decoded detections into fixed-size sifted blocks.

    ``feed`` takes decoded events sorted by round (one per round) together
    with Alice's records for those rounds and returns every block that
    closed. K-basis rounds with matching bases append one bit to each
    string; C-basis matches count an error when Bob saw A, since Alice only
    ever sends D.
    """

    def __init__(self, block_size: int, first_round: int = 0):
        self.block_size = int(block_size)
        self.next_id = 0
        self.start_round = first_round
        self.dropped = 0
        self._reset()

    def _reset(self):
        self._tx, self._rx = [], []
        self._nk = 0
        self.n = np.zeros((2, 2), np.int64)
        self.m = np.zeros((2, 2), np.int64)
        self.kept = 0
        self.mismatched = 0
        self.truth = {"s0": np.zeros(2, np.int64), "s1": np.zeros(2, np.int64), "e1": np.zeros(2, np.int64)}
        self._t0 = None
        self._t1 = None

    def feed(self, rounds, rx_slot, tx_intensity, tx_state, tx_photons, times=None) -> list[SiftedBlock]:
        rounds = np.asarray(rounds, dtype=np.int64)
        if len(rounds) and np.any(np.diff(rounds) <= 0):
            raise ValueError("rounds must be strictly increasing")
        early = rounds < self.start_round
        if early.any():
            self.dropped += int(early.sum())
            keep = ~early
            rounds, rx_slot, tx_intensity, tx_state, tx_photons = (
                rounds[keep], rx_slot[keep], tx_intensity[keep], tx_state[keep], tx_photons[keep])
            times = None if times is None else times[keep]
        rx_slot = np.asarray(rx_slot)
        tx_state = np.asarray(tx_state)
        rx_basis = (rx_slot >= 2).astype(np.int8)
        tx_basis = (tx_state >= 2).astype(np.int8)
        match = rx_basis == tx_basis
        is_k = match & (tx_basis == 0)
        k_cum = np.cumsum(is_k)
        closed = []
        start = 0
        while start < len(rounds):
            need = self.block_size - self._nk
            base = k_cum[start - 1] if start else 0
            idx = int(np.searchsorted(k_cum, base + need, side="left"))
            stop = len(rounds) if idx >= len(rounds) else idx + 1
            self._absorb(
                rounds[start:stop], rx_slot[start:stop], tx_intensity[start:stop], tx_state[start:stop],
                tx_photons[start:stop], match[start:stop], is_k[start:stop], rx_basis[start:stop],
                None if times is None else times[start:stop],
            )
            if self._nk >= self.block_size:
                closed.append(self._close(int(rounds[stop - 1])))
            start = stop
        return closed

    def _absorb(self, rounds, rx_slot, tx_int, tx_state, tx_photons, match, is_k, rx_basis, times):
        if len(rounds) == 0:
            return
        if times is not None and len(times):
            if self._t0 is None:
                self._t0 = float(times[0])
            self._t1 = float(times[-1])
        self._tx.append((tx_state[is_k] & 1).astype(np.uint8))
        self._rx.append((rx_slot[is_k] & 1).astype(np.uint8))
        self._nk += int(is_k.sum())
        err = match & ((rx_slot & 1) != (tx_state & 1))
        for b in (0, 1):
            sel = match & (rx_basis == b)
            for k in (0, 1):
                sk = sel & (tx_int == k)
                self.n[b, k] += int(sk.sum())
                self.m[b, k] += int((sk & err).sum())
            self.truth["s0"][b] += int((sel & (tx_photons == 0)).sum())
            self.truth["s1"][b] += int((sel & (tx_photons == 1)).sum())
            self.truth["e1"][b] += int((sel & (tx_photons == 1) & err).sum())
        self.kept += int(match.sum())
        self.mismatched += int((~match).sum())
        self._last_round = int(rounds[-1])

    def _close(self, end_round: int) -> SiftedBlock:
        total = end_round - self.start_round + 1
        blk = SiftedBlock(
            block_id=self.next_id,
            start_round=self.start_round,
            end_round=end_round,
            bits_tx=np.concatenate(self._tx) if self._tx else np.empty(0, np.uint8),
            bits_rx=np.concatenate(self._rx) if self._rx else np.empty(0, np.uint8),
            n=self.n.copy(),
            m=self.m.copy(),
            kept=self.kept,
            mismatched=self.mismatched,
            undetected=total - self.kept - self.mismatched,
            start_time=self._t0 if self._t0 is not None else 0.0,
            end_time=self._t1 if self._t1 is not None else 0.0,
            truth={k: v.copy() for k, v in self.truth.items()},
        )
        self.next_id += 1
        self.start_round = end_round + 1
        self._reset()
        return blk

    def partial_tallies(self) -> tuple[np.ndarray, np.ndarray]:
        return self.n.copy(), self.m.copy()


def sift(tx_state, tx_intensity, tx_photons, rx_rounds, rx_slot, block_size, first_round=0):
    """Sift a whole decoded stream against full round truth.

    ``tx_*`` are indexed by round number; ``rx_rounds`` must be strictly
    increasing. Returns ``(closed_blocks, sifter)``; the sifter holds the
    unfinished tail.
    """
    rx_rounds = np.asarray(rx_rounds, dtype=np.int64)
    sifter = Sifter(block_size, first_round)
    blocks = sifter.feed(
        rx_rounds, np.asarray(rx_slot), np.asarray(tx_intensity)[rx_rounds],
        np.asarray(tx_state)[rx_rounds], np.asarray(tx_photons)[rx_rounds],
    )
    return blocks, sifter


def write_block_log(blocks, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BLOCK_LOG_COLUMNS)
        for b in blocks:
            w.writerow(b.log_row())
