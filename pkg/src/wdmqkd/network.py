"""Star network around a trusted relay: key pools, authentication, sessions.

Every link runs its own pipeline (simulate, synchronize, sift, reconcile,
estimate, amplify) and deposits the resulting secret bits into the shared
:class:`KeyStore`. Links share no mutable state apart from the store, whose
pools are per link, so running them in threads or one after another gives
identical reports.
"""
from __future__ import annotations

import dataclasses
import hmac
import logging
import math
import socket
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelState, advance_drift, recalibrate_angle
from .core import LinkConfig, NetworkConfig, ProtocolConfig, binary_entropy, validate_config
from .finite_key import FiniteKeyEstimate, estimate, pa_seed, privacy_amplify
from .hashing import mac_key_bits, mac_tag
from .rates import decoy_parameters
from .reconciliation import (
    FramedParityOracle, ParityServer, ReconciliationError, cascade_reconcile, confirm_correctness,
    pass_permutations,
)
from .sifting import Sifter, SiftedBlock, TransmitterLedger
from .simulation import DetectorState, simulate_sparse
from .sync import ClockTracker, SyncError, recover_clock

log = logging.getLogger(__name__)

QBER_HINT_FLOOR = 1e-3
QBER_HINT_CEIL = 0.15


class InsufficientKey(RuntimeError):
    pass


class AuthenticationError(RuntimeError):
    pass


# -- key store -----------------------------------------------------------------

@dataclass(frozen=True)
class LedgerEntry:
    link: str
    offset: int
    length: int
    purpose: str


class KeyStore:
    """Per-link pools of secret bits; every bit leaves the store at most once."""

    def __init__(self):
        self._lock = threading.RLock()
        self._pools: dict[str, list[np.ndarray]] = {}
        self._size: dict[str, int] = {}
        self._offset: dict[str, int] = {}
        self._ledger: list[LedgerEntry] = []

    def _ensure(self, link: str) -> None:
        if link not in self._pools:
            self._pools[link] = []
            self._size[link] = 0
            self._offset[link] = 0

    def deposit(self, link: str, bits) -> None:
        bits = np.asarray(bits, dtype=np.uint8)
        with self._lock:
            self._ensure(link)
            if len(bits):
                self._pools[link].append(bits.copy())
                self._size[link] += len(bits)

    def available(self, link: str) -> int:
        with self._lock:
            self._ensure(link)
            return self._size[link] - self._offset[link]

    def consumed(self, link: str) -> int:
        with self._lock:
            self._ensure(link)
            return self._offset[link]

    def draw(self, link: str, n: int, purpose: str) -> np.ndarray:
        if n < 0:
            raise ValueError("cannot draw a negative number of bits")
        with self._lock:
            self._ensure(link)
            if self.available(link) < n:
                raise InsufficientKey(f"{link}: need {n} bits, {self.available(link)} available")
            start = self._offset[link]
            out = self._slice(link, start, n)
            self._offset[link] = start + n
            if n:
                self._ledger.append(LedgerEntry(link, start, n, purpose))
            return out

    def _slice(self, link, start, n):
        parts, pos = [], 0
        for chunk in self._pools[link]:
            lo, hi = max(start - pos, 0), min(start + n - pos, len(chunk))
            if lo < hi:
                parts.append(chunk[lo:hi])
            pos += len(chunk)
            if pos >= start + n:
                break
        return np.concatenate(parts) if parts else np.empty(0, np.uint8)

    def lock(self):
        return self._lock

    def ledger(self) -> list[LedgerEntry]:
        with self._lock:
            return sorted(self._ledger, key=lambda e: (e.link, e.offset))

    def drawn(self, link: str, purpose: str) -> int:
        return sum(e.length for e in self.ledger() if e.link == link and e.purpose == purpose)


def audit_ledger(entries) -> list[str]:
    """Overlapping or out-of-order consumption; empty when the ledger is clean."""
    problems = []
    by_link: dict[str, list[LedgerEntry]] = {}
    for e in entries:
        by_link.setdefault(e.link, []).append(e)
    for link, es in by_link.items():
        es = sorted(es, key=lambda e: e.offset)
        end = 0
        for e in es:
            if e.offset < end:
                problems.append(f"{link}: range at {e.offset} overlaps previous draw ending at {end}")
            end = max(end, e.offset + e.length)
    return problems


# -- relay ---------------------------------------------------------------------

@dataclass(frozen=True)
class RelayTranscript:
    link_a: str
    link_b: str
    length: int
    xor: np.ndarray


def relay_end_to_end_key(store: KeyStore, link_a: str, link_b: str, length: int):
    """Compose a key between two transmitters through the trusted relay.

    Returns ``(key_a, key_b, transcript)``: ``key_a`` is endpoint a's key,
    ``key_b`` what endpoint b recovers from the published XOR.
    """
    if link_a == link_b:
        raise ValueError("relay needs two distinct links")
    with store.lock():
        short = [lk for lk in (link_a, link_b) if store.available(lk) < length]
        if short:
            raise InsufficientKey(f"relay: {', '.join(short)} short of {length} bits")
        ka = store.draw(link_a, length, "relay")
        kb = store.draw(link_b, length, "relay")
    published = ka ^ kb
    recovered = published ^ kb
    return ka, recovered, RelayTranscript(link_a, link_b, length, published)


# -- authenticated classical messages -------------------------------------------

_HEADER = struct.Struct("<BQI")  # link_id, seq, payload_len
_TAG = struct.Struct("<Q")


@dataclass(frozen=True)
class ClassicalMessage:
    link_id: int
    seq: int
    payload: bytes
    tag: int = 0

    def signed_bytes(self) -> bytes:
        return _HEADER.pack(self.link_id, self.seq, len(self.payload)) + self.payload

    def to_bytes(self) -> bytes:
        return self.signed_bytes() + _TAG.pack(self.tag)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClassicalMessage":
        if len(data) < _HEADER.size + _TAG.size:
            raise ValueError("truncated message frame")
        link_id, seq, n = _HEADER.unpack_from(data)
        if len(data) != _HEADER.size + n + _TAG.size:
            raise ValueError("message length does not match header")
        payload = data[_HEADER.size:_HEADER.size + n]
        (tag,) = _TAG.unpack_from(data, _HEADER.size + n)
        return cls(link_id, seq, payload, tag)


def authenticate_message(msg: bytes, key_bits, tag_bits: int = 64) -> int:
    return mac_tag(msg, key_bits, tag_bits)


def verify_message(msg: bytes, tag: int, key_bits, tag_bits: int = 64) -> bool:
    expect = authenticate_message(msg, key_bits, tag_bits)
    return hmac.compare_digest(_TAG.pack(expect), _TAG.pack(tag & (2**64 - 1)))


def sign(msg: ClassicalMessage, key_bits, tag_bits: int = 64) -> ClassicalMessage:
    return dataclasses.replace(msg, tag=authenticate_message(msg.signed_bytes(), key_bits, tag_bits))


def verify(msg: ClassicalMessage, key_bits, tag_bits: int = 64) -> bool:
    return verify_message(msg.signed_bytes(), msg.tag, key_bits, tag_bits)


def send_frame(sock: socket.socket, msg: ClassicalMessage) -> None:
    sock.sendall(msg.to_bytes())


def recv_frame(sock: socket.socket) -> ClassicalMessage:
    head = _recv_exact(sock, _HEADER.size)
    _, _, n = _HEADER.unpack(head)
    rest = _recv_exact(sock, n + _TAG.size)
    return ClassicalMessage.from_bytes(head + rest)


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("socket closed mid-frame")
        buf += chunk
    return bytes(buf)


class AuthKeyPool:
    """Authentication key material of one link.

    Starts as a pre-shared random sequence and is topped up with a fixed
    quota of fresh secret bits after every successful block.
    """

    def __init__(self, preshared, tag_bits: int = 64):
        self._bits = np.asarray(preshared, dtype=np.uint8)
        self._pos = 0
        self.tag_bits = tag_bits
        self.preshared_bits = len(self._bits)

    @property
    def available(self) -> int:
        return len(self._bits) - self._pos

    def epoch_key(self, n: int) -> np.ndarray:
        if self.available < n:
            raise AuthenticationError(f"authentication pool exhausted ({self.available} < {n} bits)")
        out = self._bits[self._pos:self._pos + n]
        self._pos += n
        return out

    def refill(self, bits) -> None:
        self._bits = np.concatenate([self._bits[self._pos:], np.asarray(bits, np.uint8)])
        self._pos = 0


class Transcript:
    """Byte-level loopback between Bob and Alice's parity server."""

    def __init__(self, server: ParityServer):
        self.server = server
        self.to_alice = bytearray()
        self.to_bob = bytearray()

    def __call__(self, request: bytes) -> bytes:
        self.to_alice += request
        response = self.server.handle(request)
        self.to_bob += response
        return response


# -- reports -------------------------------------------------------------------

@dataclass
class BlockReport:
    link: str
    block_id: int
    status: str
    start_round: int
    end_round: int
    wall_time: float  # represented session time at block close, s
    duration: float   # uncompressed time the block spans, s
    qber_K: float
    qber_C: float
    n_K: int
    skl: int
    lambda_EC: int = 0
    lambda_c: int = 0
    efficiency: float | None = None
    qber_hint: float = 0.0
    estimate: FiniteKeyEstimate | None = None
    truth: dict = field(default_factory=dict)
    tallies: tuple = ()

    @property
    def skr(self) -> float:
        return self.skl / self.duration if self.duration > 0 else 0.0


@dataclass
class ChunkRecord:
    t_start: float
    t_end: float
    theta: float
    n_K: int
    m_K: int
    n_C: int
    m_C: int
    realigned: bool = False

    @property
    def qber_K(self) -> float | None:
        return self.m_K / self.n_K if self.n_K else None

    @property
    def qber_C(self) -> float | None:
        return self.m_C / self.n_C if self.n_C else None


@dataclass
class LinkReport:
    label: str
    blocks: list[BlockReport] = field(default_factory=list)
    chunks: list[ChunkRecord] = field(default_factory=list)
    status: str = "ok"
    residual_misalignment: float = 0.0
    clicks: int = 0
    sifted_n: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), np.int64))
    sifted_m: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), np.int64))
    auth_refill_bits: int = 0
    clock_period: float | None = None

    @property
    def total_secret_bits(self) -> int:
        return sum(b.skl for b in self.blocks if b.status == "ok")

    @property
    def blocks_ok(self) -> int:
        return sum(b.status == "ok" for b in self.blocks)

    @property
    def blocks_failed(self) -> int:
        return sum(b.status != "ok" for b in self.blocks)

    @property
    def mean_qber_K(self) -> float | None:
        n = self.sifted_n[0].sum()
        return float(self.sifted_m[0].sum() / n) if n else None

    @property
    def mean_qber_C(self) -> float | None:
        n = self.sifted_n[1].sum()
        return float(self.sifted_m[1].sum() / n) if n else None


@dataclass
class SessionReport:
    duration: float
    time_compress: float
    links: dict[str, LinkReport]
    ledger: list[LedgerEntry]
    store: KeyStore

    def mean_skr(self, label: str) -> float:
        """Secret bits per second of represented session time, rescaled to the uncompressed rate."""
        if self.duration <= 0:
            return 0.0
        return self.links[label].total_secret_bits * self.time_compress / self.duration

    def delivered_bits(self, label: str) -> int:
        return self.store.available(label)


# -- link pipeline ---------------------------------------------------------------

def link_rng(cfg: LinkConfig, session_seed: int) -> np.random.Generator:
    # the wavelength label is deliberately not part of the seed
    return np.random.default_rng([session_seed, cfg.seed])


class LinkPipeline:
    """One transmitter-to-relay link from photons to deposited secret key."""

    def __init__(
        self,
        cfg: LinkConfig,
        network: NetworkConfig,
        store: KeyStore,
        link_id: int = 0,
        session_seed: int = 0,
        time_compress: float = 1.0,
        block_size: int | None = None,
        tamper=None,
    ):
        self.cfg = cfg
        self.network = network
        self.protocol: ProtocolConfig = network.protocol
        self.store = store
        self.link_id = link_id
        self.compress = float(time_compress)
        self.block_size = int(block_size or self.protocol.block_size_sifted)
        self.rng = link_rng(cfg, session_seed)
        self.public_seed = int(np.random.default_rng([session_seed, cfg.seed, 1]).integers(2**62))
        self.tamper = tamper
        self.report = LinkReport(cfg.wavelength_label)
        self.auth = AuthKeyPool(
            np.random.default_rng([session_seed, cfg.seed, 2]).integers(
                0, 2, self.protocol.preshared_auth_bits, dtype=np.uint8),
            self.protocol.auth_tag_bits,
        )
        self._seq = 0
        self._prev_qber: float | None = None

    # time bookkeeping: represented seconds per uncompressed second is ``compress``
    def _wall(self, round_index: int) -> float:
        return self.network.alignment_time + round_index * self.cfg.period * self.compress

    def run(self, duration: float) -> LinkReport:
        cfg, net = self.cfg, self.network
        label = cfg.wavelength_label
        theta0 = recalibrate_angle(cfg, self.rng)  # alignment phase: residual after aligning
        ch = ChannelState.initial(cfg, theta=theta0, t=min(duration, net.alignment_time))
        self.report.residual_misalignment = theta0 + cfg.residual_misalignment
        key_time = max(0.0, duration - net.alignment_time)
        total_rounds = int(math.floor(key_time * cfg.pulse_rate / self.compress + 1e-9))
        chunk_rounds = max(1, int(round(net.chunk_time * cfg.pulse_rate / self.compress)))
        det = DetectorState()
        ledger = TransmitterLedger(cfg)
        sifter = Sifter(self.block_size, first_round=self.protocol.sync_prefix_rounds)
        tracker: ClockTracker | None = None
        pending: list = []
        last_qc = None
        realigned = False
        start = 0
        while start < total_rounds and self.report.status == "ok":
            n = min(chunk_rounds, total_rounds - start)
            stream = simulate_sparse(cfg, ch, start, n, self.rng, det)
            self.report.clicks += len(stream)
            chunk = ChunkRecord(self._wall(start), self._wall(start + n), ch.theta, 0, 0, 0, 0, realigned)
            streams = [stream]
            if tracker is None:
                pending.append(stream)
                tracker = self._try_sync(pending, ledger, final=start + n >= total_rounds)
                streams, pending = (pending, []) if tracker is not None else ([], pending)
            for s in streams:
                self._decode_and_sift(s, ledger, tracker, sifter, chunk)
            self.report.chunks.append(chunk)
            if tracker is not None:
                last_qc = chunk.qber_C
            realigned = bool(cfg.active_control and last_qc is not None and last_qc > cfg.qber_threshold)
            ch = advance_drift(ch, n * cfg.period * self.compress, cfg, self.rng, last_qc)
            start += n
        n_part, m_part = sifter.partial_tallies()
        self.report.sifted_n += n_part
        self.report.sifted_m += m_part
        log.info("%s: %d blocks, %d secret bits", label, len(self.report.blocks), self.report.total_secret_bits)
        return self.report

    def _try_sync(self, pending, ledger, final):
        ts = np.concatenate([s.timestamp for s in pending])
        if len(ts) == 0:
            return None
        truth = _concat_truth(pending)
        ledger.record(*truth)
        try:
            clock = recover_clock(
                ts, self.cfg.pulse_rate, ledger.public_states(self.protocol.sync_prefix_rounds),
                window_halfwidth=self.cfg.window_halfwidth,
            )
        except SyncError as exc:
            if final:
                log.warning("%s: %s", self.cfg.wavelength_label, exc)
                self.report.status = "sync_failed"
            return None
        self.report.clock_period = clock.period
        return ClockTracker(clock, self.cfg.window_halfwidth)

    def _decode_and_sift(self, stream, ledger, tracker, sifter, chunk):
        ledger.record(stream.true_round, stream.intensity, stream.state, stream.photon_count)
        rounds, slots, ok = tracker.decode(stream.timestamp)
        rounds, slots, times = rounds[ok], slots[ok], stream.timestamp[ok]
        if len(rounds) > 1:
            inc = np.ones(len(rounds), bool)
            inc[1:] = np.diff(rounds) > 0
            rounds, slots, times = rounds[inc], slots[inc], times[inc]
        tx_int, tx_state, tx_ph = ledger.lookup(rounds)
        after_prefix = rounds >= sifter.start_round
        rx_c, tx_c = slots >= 2, tx_state >= 2
        match = (rx_c == tx_c) & after_prefix
        err = (slots & 1) != (tx_state & 1)
        chunk.n_K += int((match & ~rx_c).sum())
        chunk.m_K += int((match & ~rx_c & err).sum())
        chunk.n_C += int((match & rx_c).sum())
        chunk.m_C += int((match & rx_c & err).sum())
        for blk in sifter.feed(rounds, slots, tx_int, tx_state, tx_ph, times):
            self.report.sifted_n += blk.n
            self.report.sifted_m += blk.m
            self._process_block(blk)

    # -- post-processing of one sifted block --

    def _qber_hint(self, blk: SiftedBlock, seed: int) -> tuple[float, int]:
        """Hint for Cascade and the number of key bits disclosed to get it."""
        if self._prev_qber is not None:
            return self._prev_qber, 0
        n = len(blk.bits_tx)
        k = max(1, int(round(self.protocol.qber_sample_fraction * n)))
        idx = np.random.default_rng([seed, 3]).choice(n, size=k, replace=False)
        q = float(np.count_nonzero(blk.bits_tx[idx] != blk.bits_rx[idx])) / k
        return q, k

    def _process_block(self, blk: SiftedBlock) -> None:
        cfg, pc = self.cfg, self.protocol
        label = cfg.wavelength_label
        seed = self.public_seed + blk.block_id
        n_K = blk.n_K
        qk = float(blk.m[0].sum() / n_K) if n_K else 0.0
        qc = float(blk.m[1].sum() / blk.n[1].sum()) if blk.n[1].sum() else 0.0
        report = BlockReport(
            link=label, block_id=blk.block_id, status="ok", start_round=blk.start_round,
            end_round=blk.end_round, wall_time=self._wall(blk.end_round + 1),
            duration=(blk.end_round - blk.start_round + 1) * cfg.period,
            qber_K=qk, qber_C=qc, n_K=n_K, skl=0, truth={k: v.tolist() for k, v in blk.truth.items()},
            tallies=(blk.n.tolist(), blk.m.tolist()),
        )
        self.report.blocks.append(report)

        hint, sample_bits = self._qber_hint(blk, seed)
        hint = min(max(hint, QBER_HINT_FLOOR), QBER_HINT_CEIL)
        report.qber_hint = hint
        if hint >= QBER_HINT_CEIL:
            report.status = "qber_too_high"
            return

        try:
            epoch_key = self.auth.epoch_key(pc.auth_refill_bits)
        except AuthenticationError as exc:
            log.warning("%s: %s; link quarantined", label, exc)
            report.status = "auth_failed"
            self.report.status = "quarantined"
            return

        perms = pass_permutations(n_K, pc.cascade_passes, seed)
        wire = Transcript(ParityServer(blk.bits_tx, perms))
        oracle = FramedParityOracle(wire, block_id=blk.block_id)
        try:
            rec = cascade_reconcile(
                None, blk.bits_rx, hint, oracle, passes=pc.cascade_passes, alpha=pc.cascade_alpha, seed=seed)
        except ReconciliationError as exc:
            log.warning("%s block %d: %s", label, blk.block_id, exc)
            report.status = "reconciliation_failed"
            return
        verified, lam_c = confirm_correctness(blk.bits_tx, rec.corrected_bits, pc.eps_cor, seed=seed)
        lam_ec = rec.leaked_bits + sample_bits
        report.lambda_EC, report.lambda_c = lam_ec, lam_c
        e_true = rec.corrections / n_K if n_K else 0.0
        report.efficiency = lam_ec / (n_K * binary_entropy(e_true)) if 0 < e_true < 1 else None
        self._prev_qber = e_true if e_true > 0 else None

        # delayed authentication of both directions' transcripts
        key_len = mac_key_bits(pc.auth_tag_bits)
        summary = np.array([blk.block_id, blk.start_round, blk.end_round, *blk.n.ravel(), *blk.m.ravel()], np.int64)
        payloads = (
            bytes(wire.to_alice),
            bytes(wire.to_bob) + summary.tobytes() + np.int64(seed).tobytes(),
        )
        for d, payload in enumerate(payloads):
            key = epoch_key[d * key_len:(d + 1) * key_len]
            msg = sign(ClassicalMessage(self.link_id, self._seq, payload), key, pc.auth_tag_bits)
            self._seq += 1
            if self.tamper is not None:
                msg = self.tamper(msg)
            if not verify(ClassicalMessage.from_bytes(msg.to_bytes()), key, pc.auth_tag_bits):
                log.warning("%s block %d: authentication failed", label, blk.block_id)
                report.status = "auth_failed"
                return

        if not verified:
            report.status = "verify_failed"
            return
        est = estimate(blk.n, blk.m, lam_ec, lam_c, decoy_parameters(cfg, pc))
        report.estimate = est
        skl = min(est.skl, n_K)
        seed_bits = pa_seed(n_K, skl, seed, blk.block_id)
        key_b = privacy_amplify(rec.corrected_bits, skl, seed_bits)
        key_a = privacy_amplify(blk.bits_tx, skl, seed_bits)
        if not np.array_equal(key_a, key_b):
            report.status = "verify_failed"
            return
        report.skl = skl
        self.store.deposit(label, key_b)
        refill = min(pc.auth_refill_bits, self.store.available(label))
        if refill:
            self.auth.refill(self.store.draw(label, refill, "auth"))
            self.report.auth_refill_bits += refill


def _concat_truth(streams):
    return (
        np.concatenate([s.true_round for s in streams]),
        np.concatenate([s.intensity for s in streams]),
        np.concatenate([s.state for s in streams]),
        np.concatenate([s.photon_count for s in streams]),
    )


def run_network_session(
    cfg: NetworkConfig,
    duration: float,
    *,
    seed: int = 0,
    time_compress: float = 1.0,
    block_size: int | None = None,
    concurrent: bool = False,
    store: KeyStore | None = None,
    tamper: dict | None = None,
) -> SessionReport:
    """Run every link for ``duration`` represented seconds.

    ``time_compress`` divides the number of pulses simulated per represented
    second; reported rates are scaled back to the uncompressed pulse rate.
    """
    cfg = validate_config(cfg)
    if duration < 0:
        raise ValueError("duration must be >= 0")
    if time_compress < 1:
        raise ValueError("time_compress must be >= 1")
    store = store or KeyStore()
    tamper = tamper or {}
    pipes = [
        LinkPipeline(lk, cfg, store, i, seed, time_compress, block_size, tamper.get(lk.wavelength_label))
        for i, lk in enumerate(cfg.links)
    ]
    if concurrent and len(pipes) > 1:
        with ThreadPoolExecutor(max_workers=len(pipes)) as ex:
            reports = list(ex.map(lambda p: p.run(duration), pipes))
    else:
        reports = [p.run(duration) for p in pipes]
    return SessionReport(
        duration=duration, time_compress=time_compress,
        links={r.label: r for r in reports}, ledger=store.ledger(), store=store,
    )
