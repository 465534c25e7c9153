"""Shared broadband receiver: passive basis choice, polarization-to-time
slot mapping, one single-photon detector per wavelength.

The four outcomes L, R, D, A occupy four equal slots of the pulse period in
that order. A detector registers at most one click per round (earliest slot
wins) and is blind for ``dead_time`` after every registered click.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import PropagatedPulse
from .core import SLOT_BASIS, SLOT_BIT, Basis, LinkConfig, Polarization

PHOTON, DARK = 0, 1


@dataclass(frozen=True)
class ClockModel:
    """Receiver-side timing grid: slot s of round r sits at
    ``offset + r * period + s * period / 4``."""

    period: float
    offset: float = 0.0

    @property
    def slot_width(self) -> float:
        return self.period / 4.0

    def slot_time(self, round_index, slot):
        return self.offset + np.asarray(round_index) * self.period + np.asarray(slot) * self.slot_width


@dataclass(frozen=True)
class DetectionEvent:
    timestamp: float
    wavelength_label: str
    slot: Polarization
    origin: int = PHOTON  # simulation truth only

    @property
    def basis(self) -> Basis:
        return SLOT_BASIS[self.slot]

    @property
    def bit(self) -> int:
        return SLOT_BIT[self.slot]


def decode_slot(slot: int) -> tuple[Basis, int]:
    return SLOT_BASIS[slot], SLOT_BIT[slot]


def measure_round(prop: PropagatedPulse, cfg: LinkConfig, rng: np.random.Generator) -> int | None:
    """Measure the surviving photons of one pulse; return the clicked slot.

    Each photon picks the key basis with probability ``p_key_rx``, flips
    within that basis with the channel error probability, and is detected
    with the detector efficiency. Earliest slot wins on multiple clicks.
    """
    best = None
    for _ in range(prop.survivors):
        rx_key = rng.random() < cfg.p_key_rx
        flip = rng.random()
        detected = rng.random() < cfg.detector_efficiency
        slot = _outcome(prop.state, rx_key, flip, prop.error_k, prop.error_c)
        if detected and (best is None or slot < best):
            best = slot
    return best


def _outcome(state, rx_key, u, error_k, error_c):
    """Slot for one photon. Works elementwise on arrays as well."""
    tx_key = np.asarray(state) < Polarization.D
    tx_bit = np.asarray(state) & 1
    same = np.asarray(rx_key) == tx_key
    err = np.where(tx_key, error_k, error_c)
    bit = np.where(same, tx_bit ^ (u < err), u < 0.5)
    slot = np.where(rx_key, bit, 2 + bit).astype(np.int8)
    return int(slot) if slot.ndim == 0 else slot


def measure_batch(
    state: np.ndarray,
    survivors: np.ndarray,
    error_k: float,
    error_c: float,
    cfg: LinkConfig,
    rng: np.random.Generator,
    efficiency: float | None = None,
) -> np.ndarray:
    """Vectorized :func:`measure_round`; returns slot per round or -1.

    ``efficiency`` overrides the detector efficiency (1.0 when the caller
    already thinned photons by detection probability).
    """
    eff = cfg.detector_efficiency if efficiency is None else efficiency
    out = np.full(len(state), 127, dtype=np.int8)
    idx = np.flatnonzero(survivors > 0)
    remaining = survivors[idx].copy()
    while len(idx):
        n = len(idx)
        u = rng.random((n, 3))
        slot = _outcome(state[idx], u[:, 0] < cfg.p_key_rx, u[:, 1], error_k, error_c)
        hit = u[:, 2] < eff
        cur = out[idx]
        out[idx] = np.where(hit & (slot < cur), slot, cur)
        remaining -= 1
        keep = remaining > 0
        idx, remaining = idx[keep], remaining[keep]
    out[out == 127] = -1
    return out


def inject_dark_counts(
    duration: float,
    dark_rate: float,
    rng: np.random.Generator,
    pulse_rate: float = 50e6,
    start_round: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dark clicks over ``duration`` seconds: ``(round_index, slot, phase)``.

    The count is Poisson(dark_rate * duration) and click times are uniform.
    Each click is reported against its nearest slot centre; ``phase`` is the
    offset from that centre in units of the slot width, in [-0.5, 0.5).
    """
    if duration < 0:
        raise ValueError("duration must be >= 0")
    n_rounds = int(round(duration * pulse_rate))
    if dark_rate <= 0 or n_rounds == 0:
        return np.empty(0, np.int64), np.empty(0, np.int8), np.empty(0)
    count = rng.poisson(dark_rate * duration)
    rounds = start_round + rng.integers(0, n_rounds, size=count, dtype=np.int64)
    pos = rng.uniform(-0.5, 3.5, size=count)
    slots = np.rint(pos).astype(np.int8)
    phase = pos - slots
    order = np.lexsort((pos, rounds))
    return rounds[order], slots[order], phase[order]


def dark_events(duration, dark_rate, rng, label="", pulse_rate=50e6, clock=None):
    """:func:`inject_dark_counts` as a list of :class:`DetectionEvent`."""
    rounds, slots, phase = inject_dark_counts(duration, dark_rate, rng, pulse_rate)
    clock = clock or ClockModel(1.0 / pulse_rate)
    ts = clock.slot_time(rounds, slots) + phase * clock.slot_width
    return [DetectionEvent(float(t), label, Polarization(int(s)), DARK) for t, s in zip(ts, slots)]


def earliest_per_round(round_index: np.ndarray, slot: np.ndarray) -> np.ndarray:
    """Mask keeping the earliest-slot event of each round.

    Input must be sorted by (round, slot).
    """
    keep = np.ones(len(round_index), dtype=bool)
    if len(round_index) > 1:
        keep[1:] = round_index[1:] != round_index[:-1]
    return keep


def apply_dead_time(times: np.ndarray, dead_time: float, blind_until: float = -math.inf) -> tuple[np.ndarray, float]:
    """Non-paralyzable dead time over sorted click times.

    Returns the keep mask and the end of the blind interval after the last
    kept click. A click is kept iff it arrives at least ``dead_time`` after
    the previous kept click (and after ``blind_until``).
    """
    times = np.asarray(times, dtype=np.float64)
    n = len(times)
    keep = np.zeros(n, dtype=bool)
    i = int(np.searchsorted(times, blind_until, side="left"))
    if i >= n:
        return keep, blind_until
    if dead_time <= 0:
        keep[i:] = True
    else:
        # jump from each kept click to the first one outside its blind window
        nxt = np.searchsorted(times, times + dead_time, side="left").tolist()
        kept = []
        while i < n:
            kept.append(i)
            i = nxt[i]
        keep[kept] = True
    if keep.any():
        blind_until = max(blind_until, float(times[keep][-1]) + dead_time)
    return keep, blind_until


def decode_timestamps(timestamps: np.ndarray, clock: ClockModel, window_halfwidth: float):
    """Map timestamps to the nearest (round, slot) cell.

    Returns ``(round_index, slot, accepted)``; events farther than
    ``window_halfwidth`` from every slot centre are rejected.
    """
    t = np.asarray(timestamps, dtype=np.float64)
    cell = np.rint((t - clock.offset) / clock.slot_width).astype(np.int64)
    resid = t - (clock.offset + cell * clock.slot_width)
    accepted = np.abs(resid) <= window_halfwidth
    return cell // 4, (cell % 4).astype(np.int8), accepted


def decode_event(ev: DetectionEvent, clock: ClockModel, window_halfwidth: float = 1e-9):
    """Decode one event to ``(round_index, basis, bit)``, or ``None`` if rejected."""
    r, s, ok = decode_timestamps(np.array([ev.timestamp]), clock, window_halfwidth)
    if not ok[0]:
        return None
    slot = int(s[0])
    return int(r[0]), SLOT_BASIS[slot], SLOT_BIT[slot]


@dataclass
class DetectionStream:
    """Clicks of one detector, in timestamp order, with simulation truth.

    The truth columns (``true_round`` onwards) describe the transmitter round
    the click belongs to and are never read by the key pipeline.
    """

    timestamp: np.ndarray
    slot: np.ndarray
    true_round: np.ndarray
    origin: np.ndarray
    intensity: np.ndarray
    state: np.ndarray
    photon_count: np.ndarray
    wavelength_label: str = ""
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.timestamp)

    @classmethod
    def empty(cls, label: str = "") -> "DetectionStream":
        z = np.empty(0)
        zi = np.empty(0, dtype=np.int64)
        z8 = np.empty(0, dtype=np.int8)
        return cls(z, z8, zi, z8, z8, z8, zi, label)

    def select(self, mask) -> "DetectionStream":
        return DetectionStream(
            self.timestamp[mask], self.slot[mask], self.true_round[mask], self.origin[mask],
            self.intensity[mask], self.state[mask], self.photon_count[mask], self.wavelength_label,
        )

    @classmethod
    def concat(cls, parts: list["DetectionStream"], label: str = "") -> "DetectionStream":
        if not parts:
            return cls.empty(label)
        cols = ("timestamp", "slot", "true_round", "origin", "intensity", "state", "photon_count")
        return cls(*(np.concatenate([getattr(p, c) for p in parts]) for c in cols), label or parts[0].wavelength_label)

    def events(self) -> list[DetectionEvent]:
        return [
            DetectionEvent(float(t), self.wavelength_label, Polarization(int(s)), int(o))
            for t, s, o in zip(self.timestamp, self.slot, self.origin)
        ]


def export_detections_csv(stream: DetectionStream, path: str | Path) -> None:
    """Time-tagger style log: ``timestamp_ns,wavelength_label,slot``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_ns", "wavelength_label", "slot"])
        names = [p.name for p in Polarization]
        for t, s in zip(stream.timestamp, stream.slot):
            w.writerow([repr(float(t) * 1e9), stream.wavelength_label, names[int(s)]])


def load_detections_csv(path: str | Path) -> tuple[np.ndarray, list[str], np.ndarray]:
    """Read a detection log; returns (timestamps in s, labels, slot indices)."""
    ts, labels, slots = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ts.append(float(row["timestamp_ns"]) * 1e-9)
            labels.append(row["wavelength_label"])
            slots.append(Polarization[row["slot"]].value)
    return np.array(ts), labels, np.array(slots, dtype=np.int8)
