"""Universal hashing over bit strings.

Toeplitz hashing backs privacy amplification and the correctness check;
the polynomial-evaluation MAC backs classical-channel authentication.
"""
from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve

_FFT_CHUNK = 1 << 20
_DIRECT_MAX_ROWS = 256
_HORNER_MAX_WORDS = 256  # short messages: plain integer Horner beats numpy overhead


def as_bits(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.uint8)
    if a.size and a.max() > 1:
        raise ValueError("bit arrays must contain only 0 and 1")
    return a


def toeplitz_hash_naive(bits, seed, out_len: int) -> np.ndarray:
    """Dense GF(2) matrix-vector product; reference implementation."""
    x = as_bits(bits).astype(np.int64)
    s = as_bits(seed).astype(np.int64)
    n = len(x)
    out = np.zeros(out_len, np.uint8)
    for i in range(out_len):
        row = s[i - np.arange(n) + n - 1]
        out[i] = int(row @ x) & 1
    return out


def _direct(x, s, m):
    # y_i = <rs[m-1-i : m-1-i+n], x> with rs the reversed seed
    n = len(x)
    nb = (n + 7) // 8
    xp = np.packbits(x)
    rs = s[::-1]
    shifted = [np.packbits(rs[r:]) for r in range(8)]
    out = np.empty(m, np.uint8)
    for i in range(m):
        w = m - 1 - i
        q, r = divmod(w, 8)
        win = shifted[r][q:q + nb]
        if len(win) < nb:
            win = np.concatenate([win, np.zeros(nb - len(win), np.uint8)])
        out[i] = int(np.bitwise_count(win & xp).sum()) & 1
    return out


def _fft(x, s, m):
    n = len(x)
    acc = np.zeros(m, np.int64)
    for a in range(0, n, _FFT_CHUNK):
        xc = x[a:a + _FFT_CHUNK].astype(np.float64)
        L = len(xc)
        lo = n - 1 - a - (L - 1)
        sub = s[lo:n - 1 - a + m].astype(np.float64)
        conv = fftconvolve(sub, xc)[L - 1:L - 1 + m]
        r = np.rint(conv)
        if np.abs(conv - r).max(initial=0.0) > 0.25:
            raise ArithmeticError("FFT convolution lost integer precision")
        acc += r.astype(np.int64)
    return (acc & 1).astype(np.uint8)


def toeplitz_hash(bits, seed, out_len: int) -> np.ndarray:
    """Hash ``bits`` (length n) to ``out_len`` bits with the Toeplitz matrix
    ``T[i, j] = seed[i - j + n - 1]``; ``seed`` has length ``n + out_len - 1``.
    """
    x = as_bits(bits)
    s = as_bits(seed)
    n = len(x)
    if out_len < 0:
        raise ValueError("out_len must be >= 0")
    if out_len == 0:
        return np.empty(0, np.uint8)
    if len(s) != n + out_len - 1:
        raise ValueError(f"seed must have {n + out_len - 1} bits, got {len(s)}")
    if n == 0:
        return np.zeros(out_len, np.uint8)
    if out_len <= _DIRECT_MAX_ROWS:
        return _direct(x, s, out_len)
    return _fft(x, s, out_len)


# -- polynomial MAC -----------------------------------------------------------

MERSENNE61 = (1 << 61) - 1
_PRIMES = {16: 65521, 32: 4294967291, 64: MERSENNE61}
_WORD_BYTES = {16: 1, 32: 3, 64: 7}


def _mulmod61(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m31 = np.uint64((1 << 31) - 1)
    m30 = np.uint64((1 << 30) - 1)
    p = np.uint64(MERSENNE61)
    a1, a0 = a >> np.uint64(31), a & m31
    b1, b0 = b >> np.uint64(31), b & m31
    mid = a1 * b0 + a0 * b1
    x = (a1 * b1 << np.uint64(1)) + (mid >> np.uint64(30)) + ((mid & m30) << np.uint64(31)) + a0 * b0
    x = (x & p) + (x >> np.uint64(61))
    x = (x & p) + (x >> np.uint64(61))
    return np.where(x >= p, x - p, x)


def _mulmod(a, b, prime):
    if prime == MERSENNE61:
        return _mulmod61(a, b)
    return (a * b) % np.uint64(prime)


def _words(msg: bytes, tag_bits: int) -> np.ndarray:
    w = _WORD_BYTES[tag_bits]
    data = msg + b"\x00" * (-len(msg) % w)
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, w).astype(np.uint64)
    words = np.zeros(len(raw), np.uint64)
    for j in range(w):
        words |= raw[:, j] << np.uint64(8 * j)
    # length word stops zero-padding collisions
    return np.append(words, np.uint64(len(msg) % _PRIMES[tag_bits]))


def poly_hash(msg: bytes, r: int, tag_bits: int = 64) -> int:
    """sum_i w_i r^(L-i) mod p over the message words w_1..w_L."""
    prime = _PRIMES[tag_bits]
    w = _words(msg, tag_bits)
    L = len(w)
    if L <= _HORNER_MAX_WORDS:
        acc = 0
        for x in w.tolist():
            acc = (acc + x) * r % prime
        return acc
    pw = np.array([r % prime], np.uint64)  # r^1 .. r^k
    rr = pw.copy()                          # r^k
    while len(pw) < L:
        pw = np.concatenate([pw, _mulmod(pw, np.full(len(pw), rr[0], np.uint64), prime)])
        rr = _mulmod(rr, rr, prime)
    powers = pw[:L][::-1]  # w_1 gets r^L
    terms = _mulmod(w % np.uint64(prime), powers, prime)
    total = 0
    for chunk in np.array_split(terms, max(1, len(terms) // 4096)):
        total = (total + int(chunk.astype(object).sum())) % prime
    return total


def mac_key_bits(tag_bits: int = 64) -> int:
    """Key material per tag: hash point plus one-time pad."""
    return 2 * tag_bits


def bits_to_int(bits) -> int:
    b = as_bits(bits)
    return int.from_bytes(np.packbits(b, bitorder="little").tobytes(), "little") if len(b) else 0


def mac_tag(msg: bytes, key_bits, tag_bits: int = 64) -> int:
    """Wegman-Carter tag: poly_hash(msg, r) + s mod p with ``key_bits = r || s``."""
    kb = as_bits(key_bits)
    if len(kb) != mac_key_bits(tag_bits):
        raise ValueError(f"MAC key needs {mac_key_bits(tag_bits)} bits, got {len(kb)}")
    prime = _PRIMES[tag_bits]
    r = bits_to_int(kb[:tag_bits]) % prime
    s = bits_to_int(kb[tag_bits:]) % prime
    return (poly_hash(msg, r, tag_bits) + s) % prime
