"""Clock recovery from detection timestamps alone.

The four polarization slots split the pulse period into quarters, so every
click, whatever its slot, sits on a grid of spacing ``period / 4``. The
period is found by maximizing the concentration of
``exp(2 pi i * 4 t / period)`` over a +-50 ppm scan, refined by golden
section and then by a least-squares fit of timestamps against grid index.
The absolute offset (which quarter is slot L, and which grid cell is round
0) comes from correlating decoded outcomes with a public prefix of known
transmitter states.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.optimize import minimize_scalar

from .core import SLOT_BASIS, SLOT_BIT
from .receiver import ClockModel, decode_timestamps


class SyncError(RuntimeError):
    """No periodic structure found in the timestamps."""


def _concentration(t: np.ndarray, period: float) -> float:
    z = np.exp(2j * np.pi * 4.0 * t / period)
    return abs(z.mean())


def _concentration_many(t: np.ndarray, periods: np.ndarray) -> np.ndarray:
    out = np.empty(len(periods))
    step = max(1, 2_000_000 // max(len(t), 1))
    for i in range(0, len(periods), step):
        ph = 2.0 * np.pi * 4.0 * np.outer(1.0 / periods[i:i + step], t)
        out[i:i + step] = np.abs(np.exp(1j * ph).mean(axis=1))
    return out


def _fit_grid(t: np.ndarray, period: float, offset: float) -> tuple[float, float]:
    """Least-squares (offset, period) from timestamps on the quarter grid."""
    cell = np.rint((t - offset) / (period / 4.0))
    c0 = cell.mean()
    t0 = t.mean()
    dc = cell - c0
    denom = float(np.dot(dc, dc))
    if denom == 0:
        return offset, period
    slope = float(np.dot(dc, t - t0)) / denom
    return t0 - slope * c0, 4.0 * slope


def estimate_period(
    timestamps: np.ndarray,
    nominal_rate: float,
    scan_ppm: float = 50.0,
    significance: float = 1e-6,
) -> tuple[float, float]:
    """Return ``(period, phase_offset)`` with ``phase_offset`` in [0, period/4).

    ``phase_offset`` places the quarter-period grid on the absolute time axis;
    which grid point is slot L of round 0 is left to the caller.
    """
    t_abs = np.sort(np.asarray(timestamps, dtype=np.float64))
    if len(t_abs) < 2:
        raise SyncError("too few timestamps")
    ref = t_abs[0]
    t = t_abs - ref
    p0 = 1.0 / nominal_rate
    span = t[-1]

    # first level: short span so the scan grid stays affordable
    t1 = t[t <= min(span, 0.005)]
    if len(t1) < 500:
        t1 = t[: min(len(t), 500)]
    width = p0 / (4.0 * max(t1[-1], p0))  # relative width of the peak
    step = width / 4.0
    n_steps = int(math.ceil(scan_ppm * 1e-6 / step))
    grid = p0 * (1.0 + np.arange(-n_steps, n_steps + 1) * step)
    r = _concentration_many(t1, grid)
    best = int(np.argmax(r))
    z = len(t1) * r[best] ** 2
    if z < math.log(len(grid) / significance):
        raise SyncError(f"no clock found: Rayleigh statistic {z:.1f} below threshold")
    period = grid[best]

    # widen the span geometrically, rescanning around the previous estimate
    cur_span = t1[-1]
    rel_err = step
    while cur_span < span:
        cur_span = min(span, cur_span * 8.0)
        sub = t[t <= cur_span]
        width = p0 / (4.0 * cur_span)
        k = int(math.ceil(2 * rel_err / (width / 4.0)))
        k = min(max(k, 4), 400)
        g = period * (1.0 + np.linspace(-2 * rel_err, 2 * rel_err, 2 * k + 1))
        rr = _concentration_many(sub, g)
        period = g[int(np.argmax(rr))]
        rel_err = 4 * rel_err / (2 * k)

    res = minimize_scalar(
        lambda p: -_concentration(t, p),
        bracket=(period * (1 - rel_err), period, period * (1 + rel_err)),
        method="golden",
        options={"xtol": 1e-14},
    )
    if -res.fun >= _concentration(t, period):
        period = float(res.x)

    phase = np.angle(np.exp(2j * np.pi * 4.0 * t / period).mean())
    offset = ref + phase / (2 * np.pi) * period / 4.0
    for _ in range(2):
        offset, period = _fit_grid(t_abs, period, offset)
    offset = offset % (period / 4.0)
    return period, offset


def _align_to_prefix(t, period, phase_offset, prefix_states, window_halfwidth, max_shift_rounds):
    """Choose the quarter/round shift whose decoding best matches the prefix."""
    q = period / 4.0
    tx_state = np.asarray(prefix_states)
    tx_key = tx_state < 2
    tx_bit = tx_state & 1
    best, best_score = phase_offset, -np.inf
    for shift in range(-4 * max_shift_rounds, 4 * max_shift_rounds + 4):
        off = phase_offset + shift * q
        rounds, slots, ok = decode_timestamps(t, ClockModel(period, off), window_halfwidth)
        m = ok & (rounds >= 0) & (rounds < len(tx_state))
        if not m.any():
            continue
        r, s = rounds[m], slots[m]
        rx_key = np.asarray(SLOT_BASIS, dtype=np.int8)[s] == 0
        rx_bit = np.asarray(SLOT_BIT, dtype=np.int8)[s]
        match = rx_key == tx_key[r]
        agree = match & (rx_bit == tx_bit[r])
        score = 2 * agree.sum() - match.sum()
        if score > best_score:
            best, best_score = off, score
    return best


def recover_clock(
    timestamps,
    nominal_rate: float,
    prefix_states=None,
    window_halfwidth: float = 1e-9,
    max_shift_rounds: int = 8,
    min_events: int = 10_000,
    min_span: float = 0.1,
    strict: bool = True,
) -> ClockModel:
    """Recover period and offset of the transmitter clock.

    ``prefix_states`` holds the publicly known polarization states of the
    first rounds; without it the offset is only known modulo a quarter
    period. ``strict`` enforces the minimum event count and span.
    """
    t = np.sort(np.asarray(timestamps, dtype=np.float64))
    if strict and (len(t) < min_events or (t[-1] - t[0]) < min_span):
        raise SyncError(f"need >= {min_events} timestamps over >= {min_span} s, got {len(t)}")
    period, phase_offset = estimate_period(t, nominal_rate)
    if prefix_states is None:
        return ClockModel(period, phase_offset)
    prefix_end = t[0] + (len(prefix_states) + 2 * max_shift_rounds) * period
    early = t[t <= prefix_end]
    off = _align_to_prefix(early, period, phase_offset, prefix_states, window_halfwidth, max_shift_rounds)
    return ClockModel(period, off)


class ClockTracker:
    """Keeps a recovered clock locked over long sessions.

    Every accepted event updates a running least-squares fit of timestamp
    against grid cell; events are decoded in segments no longer than the
    span already fitted so the accumulated phase error stays inside the
    acceptance window.
    """

    def __init__(self, clock: ClockModel, window_halfwidth: float, fit_start: float | None = None):
        self.clock = clock
        self.window_halfwidth = window_halfwidth
        self._n = 0
        self._mc = 0.0
        self._mt = 0.0
        self._scc = 0.0
        self._sct = 0.0
        self._c_ref = None
        self._t_ref = None
        self.span_end = fit_start if fit_start is not None else clock.offset
        self.span_start = self.span_end

    def _update(self, cell: np.ndarray, t: np.ndarray) -> None:
        if len(cell) == 0:
            return
        if self._c_ref is None:
            self._c_ref = int(cell[0])
            self._t_ref = float(t[0])
            self.span_start = float(t[0])
        c = (cell - self._c_ref).astype(np.float64)
        x = t - self._t_ref
        n_b = len(c)
        mc_b, mt_b = c.mean(), x.mean()
        scc_b = float(np.dot(c - mc_b, c - mc_b))
        sct_b = float(np.dot(c - mc_b, x - mt_b))
        n = self._n + n_b
        dc, dt = mc_b - self._mc, mt_b - self._mt
        self._scc += scc_b + dc * dc * self._n * n_b / n
        self._sct += sct_b + dc * dt * self._n * n_b / n
        self._mc += dc * n_b / n
        self._mt += dt * n_b / n
        self._n = n
        if self._n > 2 and self._scc > 0:
            slope = self._sct / self._scc
            intercept = self._t_ref + self._mt - slope * (self._mc + self._c_ref)
            self.clock = ClockModel(4.0 * slope, intercept)

    def decode(self, timestamps: np.ndarray):
        """Decode sorted timestamps to ``(round, slot, accepted)`` while tracking."""
        t = np.asarray(timestamps, dtype=np.float64)
        rounds = np.empty(len(t), np.int64)
        slots = np.empty(len(t), np.int8)
        ok = np.zeros(len(t), bool)
        i = 0
        while i < len(t):
            horizon = self.span_end + max(self.span_end - self.span_start, 1e-3)
            j = int(np.searchsorted(t, horizon, side="right"))
            j = max(j, i + 1)
            seg = t[i:j]
            q = self.clock.slot_width
            cell = np.rint((seg - self.clock.offset) / q).astype(np.int64)
            acc = np.abs(seg - (self.clock.offset + cell * q)) <= self.window_halfwidth
            rounds[i:j] = cell // 4
            slots[i:j] = cell % 4
            ok[i:j] = acc
            self._update(cell[acc], seg[acc])
            self.span_end = float(seg[-1])
            i = j
        return rounds, slots, ok
