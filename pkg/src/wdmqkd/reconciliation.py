"""Cascade error correction and correctness confirmation.

Bob corrects his string against parities that Alice discloses through a
parity oracle. The oracle is the only path from Alice's bits to Bob, so
its disclosure counter *is* the error-correction leakage. Answers are
cached on Bob's side: asking twice for the same range reveals nothing new
and is not counted.

Odd blocks are resolved in batches: all odd blocks of the lowest pass that
has any are binary-searched together (blocks of one pass are disjoint),
the located errors are flipped, and the parity of every block containing a
flipped bit in every pass run so far is toggled. This repeats until no odd
block remains, which is Cascade's back-tracking.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .core import binary_entropy
from .hashing import as_bits, toeplitz_hash

QBER_HINT_MAX = 0.15


class ReconciliationError(RuntimeError):
    pass


def pass_permutations(n: int, passes: int, seed: int) -> list[np.ndarray]:
    """Public shuffles; pass 1 keeps the natural order."""
    rng = np.random.default_rng([seed, n, 0xCA5CADE])
    perms = [np.arange(n, dtype=np.int64)]
    for _ in range(1, passes):
        perms.append(rng.permutation(n).astype(np.int64))
    return perms


def _prefix_parity(bits: np.ndarray) -> np.ndarray:
    out = np.zeros(len(bits) + 1, np.uint8)
    np.bitwise_xor.accumulate(bits, out=out[1:])
    return out


class ParityOracle(Protocol):
    disclosed: int

    def parities(self, pass_index: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray: ...


class LocalParityOracle:
    """Alice's side: parities of ``[lo, hi)`` ranges in a pass's order."""

    def __init__(self, bits, permutations: list[np.ndarray], fail_after: int | None = None):
        bits = as_bits(bits)
        self._prefix = [_prefix_parity(bits[p]) for p in permutations]
        self.disclosed = 0
        self._fail_after = fail_after

    def parities(self, pass_index, lo, hi):
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        if self._fail_after is not None and self.disclosed + len(lo) > self._fail_after:
            raise ReconciliationError("parity oracle failed")
        pre = self._prefix[pass_index]
        self.disclosed += len(lo)
        return pre[hi] ^ pre[lo]


# -- wire format ---------------------------------------------------------------

_FRAME = struct.Struct("<QBIIB")  # block_id, pass, lo, hi, parity


def encode_parity_frames(block_id: int, pass_index: int, lo, hi, parity=None) -> bytes:
    """Length-prefixed frames ``(block_id, pass, lo, hi, parity)``."""
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    par = np.zeros(len(lo), np.uint8) if parity is None else np.asarray(parity, np.uint8)
    rec = np.zeros(len(lo), dtype=np.dtype([
        ("len", "<u4"), ("block", "<u8"), ("pass", "u1"), ("lo", "<u4"), ("hi", "<u4"), ("par", "u1"),
    ]))
    rec["len"] = _FRAME.size
    rec["block"] = block_id
    rec["pass"] = pass_index
    rec["lo"] = lo
    rec["hi"] = hi
    rec["par"] = par
    return rec.tobytes()


def decode_parity_frames(data: bytes):
    """Inverse of :func:`encode_parity_frames`; returns a structured array."""
    dt = np.dtype([("len", "<u4"), ("block", "<u8"), ("pass", "u1"), ("lo", "<u4"), ("hi", "<u4"), ("par", "u1")])
    if len(data) % dt.itemsize:
        raise ReconciliationError("truncated parity frame")
    rec = np.frombuffer(data, dtype=dt)
    if len(rec) and np.any(rec["len"] != _FRAME.size):
        raise ReconciliationError("bad parity frame length")
    return rec


class ParityServer:
    """Alice's endpoint answering framed parity requests."""

    def __init__(self, bits, permutations):
        self._oracle = LocalParityOracle(bits, permutations)

    def handle(self, request: bytes) -> bytes:
        rec = decode_parity_frames(request)
        out = np.empty(len(rec), np.uint8)
        for p in np.unique(rec["pass"]):
            m = rec["pass"] == p
            out[m] = self._oracle.parities(int(p), rec["lo"][m].astype(np.int64), rec["hi"][m].astype(np.int64))
        resp = rec.copy()
        resp["par"] = out
        return resp.tobytes()


class FramedParityOracle:
    """Bob's side over a byte transport; counts parity frames received."""

    def __init__(self, transport: Callable[[bytes], bytes], block_id: int = 0):
        self._transport = transport
        self.block_id = block_id
        self.disclosed = 0
        self.bytes_sent = 0
        self.bytes_received = 0

    def parities(self, pass_index, lo, hi):
        req = encode_parity_frames(self.block_id, pass_index, lo, hi)
        self.bytes_sent += len(req)
        resp = self._transport(req)
        self.bytes_received += len(resp)
        rec = decode_parity_frames(resp)
        if len(rec) != len(lo) or np.any(rec["lo"] != np.asarray(lo)) or np.any(rec["hi"] != np.asarray(hi)):
            raise ReconciliationError("parity response does not match request")
        self.disclosed += len(rec)
        return rec["par"].copy()


# -- Cascade -------------------------------------------------------------------

@dataclass
class ReconciliationResult:
    corrected_bits: np.ndarray
    leaked_bits: int
    confirm_bits: int = 0
    verified: bool = False
    corrections: int = 0
    efficiency: float | None = None
    passes: int = 0
    block_sizes: tuple = ()


def initial_block_size(qber_hint: float, alpha: float = 1.6) -> int:
    return max(2, math.ceil(alpha / qber_hint))


class _CachedOracle:
    def __init__(self, oracle, n):
        self.oracle = oracle
        self.n1 = n + 1
        self.cache: dict[int, int] = {}

    def remember(self, p: int, lo: np.ndarray, hi: np.ndarray, par: np.ndarray) -> None:
        for k, v in zip(((p * self.n1 + lo) * self.n1 + hi).tolist(), par.tolist()):
            self.cache[k] = v

    def query(self, p: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        keys = ((p * self.n1 + lo) * self.n1 + hi).tolist()
        cache = self.cache
        out = np.empty(len(keys), np.uint8)
        missing = [i for i, k in enumerate(keys) if k not in cache]
        if missing:
            mi = np.asarray(missing, dtype=np.int64)
            ans = self.oracle.parities(p, lo[mi], hi[mi])
            for k, v in zip((keys[i] for i in missing), ans.tolist()):
                cache[k] = v
        for i, k in enumerate(keys):
            out[i] = cache[k]
        return out


def cascade_reconcile(
    bits_tx,
    bits_rx,
    qber_hint: float | None,
    oracle: ParityOracle | None = None,
    *,
    passes: int = 4,
    alpha: float = 1.6,
    k1: int | None = None,
    seed: int = 0,
) -> ReconciliationResult:
    """Correct ``bits_rx`` towards ``bits_tx``.

    ``bits_tx`` is only used to build the default in-process oracle; pass
    ``oracle`` to run against a remote Alice (then ``bits_tx`` may be None).
    Pass 1 uses blocks of ``ceil(alpha / qber_hint)`` bits (or ``k1``), each
    later pass doubles the size under a fresh public shuffle.
    """
    b = as_bits(bits_rx).copy()
    n = len(b)
    if bits_tx is not None and len(bits_tx) != n:
        raise ValueError("bit strings must have equal length")
    if k1 is None:
        if qber_hint is None or not 0.0 < qber_hint < QBER_HINT_MAX:
            raise ReconciliationError(f"qber_hint {qber_hint!r} outside (0, {QBER_HINT_MAX})")
        k1 = initial_block_size(qber_hint, alpha)
    if n == 0:
        return ReconciliationResult(b, 0, passes=passes)
    perms = pass_permutations(n, passes, seed)
    if oracle is None:
        oracle = LocalParityOracle(bits_tx, perms)
    cached = _CachedOracle(oracle, n)
    start_disclosed = oracle.disclosed
    sizes = [min(k1 << i, n) for i in range(passes)]
    positions = [np.empty(n, np.int64) for _ in range(passes)]
    for p, perm in enumerate(perms):
        positions[p][perm] = np.arange(n, dtype=np.int64)
    odd: list[np.ndarray] = []
    corrections = 0

    for p in range(passes):
        k = sizes[p]
        starts = np.arange(0, n, k, dtype=np.int64)
        ends = np.minimum(starts + k, n)
        if p == 0:
            a_par = cached.query(p, starts, ends)
            total_parity = int(np.bitwise_xor.reduce(a_par))
        else:
            # the last block's parity follows from the total parity known since pass 1
            a_par = np.empty(len(starts), np.uint8)
            a_par[:-1] = cached.query(p, starts[:-1], ends[:-1])
            a_par[-1] = total_parity ^ (int(np.bitwise_xor.reduce(a_par[:-1])) if len(starts) > 1 else 0)
            cached.remember(p, starts[-1:], ends[-1:], a_par[-1:])
        b_par = np.bitwise_xor.reduceat(b[perms[p]], starts)
        odd.append((a_par ^ b_par).astype(bool))
        while True:
            q = next((i for i in range(p + 1) if odd[i].any()), None)
            if q is None:
                break
            blocks = np.flatnonzero(odd[q])
            found = _binary_search(cached, q, perms[q], b, blocks * sizes[q], np.minimum((blocks + 1) * sizes[q], n))
            b[found] ^= 1
            corrections += len(found)
            for i in range(p + 1):
                hit = positions[i][found] // sizes[i]
                toggles = np.bincount(hit, minlength=len(odd[i])) & 1
                odd[i] ^= toggles.astype(bool)

    leaked = oracle.disclosed - start_disclosed
    e = corrections / n
    eff = leaked / (n * binary_entropy(e)) if corrections else None
    return ReconciliationResult(
        corrected_bits=b, leaked_bits=leaked, corrections=corrections,
        efficiency=eff, passes=passes, block_sizes=tuple(sizes),
    )


def _binary_search(cached: _CachedOracle, q, perm, b, lo, hi) -> np.ndarray:
    """Locate one error in each odd range ``[lo, hi)`` of pass ``q``."""
    pre = _prefix_parity(b[perm])
    lo = lo.copy()
    hi = hi.copy()
    while True:
        active = np.flatnonzero(hi - lo > 1)
        if len(active) == 0:
            break
        l, h = lo[active], hi[active]
        mid = l + (h - l) // 2
        a = cached.query(q, l, mid)
        left = a != (pre[mid] ^ pre[l])
        hi[active] = np.where(left, mid, h)
        lo[active] = np.where(left, l, mid)
    return np.unique(perm[lo])


def confirm_correctness(bits_a, bits_b, eps_cor: float = 2.0**-64, seed: int = 0, tag_bits: int | None = None):
    """Compare Toeplitz hashes of both strings under a shared public seed.

    Returns ``(verified, tag_length)``; the tag length is the disclosure
    ``lambda_c``.
    """
    a = as_bits(bits_a)
    b = as_bits(bits_b)
    if len(a) != len(b):
        raise ValueError("bit strings must have equal length")
    t = tag_bits if tag_bits is not None else math.ceil(math.log2(1.0 / eps_cor) - 1e-12)
    rng = np.random.default_rng([seed, len(a), 0xC0FF])
    s = rng.integers(0, 2, size=len(a) + t - 1, dtype=np.uint8)
    ha = toeplitz_hash(a, s, t)
    hb = toeplitz_hash(b, s, t)
    return bool(np.array_equal(ha, hb)), t
