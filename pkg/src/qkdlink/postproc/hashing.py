"""Universal hashing: polynomial verification tags and Toeplitz extraction."""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass

import numpy as np

# smallest prime above 2**64; 64-bit chunks are field elements without reduction
TAG_PRIME = (1 << 64) + 13
TAG_BITS = 64
SEED_BYTES = 16


@dataclass(frozen=True)
class VerificationTag:
    tag: int
    hash_seed: bytes


def _chunks(bits: np.ndarray) -> list[int]:
    # big-endian 64-bit words, last one zero-padded
    packed = np.packbits(bits)
    pad = (-packed.size) % 8
    if pad:
        packed = np.concatenate([packed, np.zeros(pad, dtype=np.uint8)])
    return packed.view(">u8").tolist()


def _seed_terms(hash_seed: bytes) -> tuple[int, int]:
    if len(hash_seed) != SEED_BYTES:
        raise ValueError(f"hash seed must be {SEED_BYTES} bytes")
    point = int.from_bytes(hash_seed[:8], "big") % TAG_PRIME
    const = int.from_bytes(hash_seed[8:], "big") % TAG_PRIME
    return point, const


def polynomial_tag(bits, hash_seed: bytes) -> int:
    """Evaluate sum(c_i x^(L-i)) + b mod p at the seed's point x.

    Two distinct blocks of equal length collide for at most L of the
    possible points, L = ceil(len/64).
    """
    x, b = _seed_terms(hash_seed)
    acc = 0
    for c in _chunks(np.asarray(bits, dtype=np.uint8) & 1):
        acc = (acc + c) * x % TAG_PRIME
    return (acc + b) % TAG_PRIME % (1 << TAG_BITS)


def verify(block, hash_seed: bytes) -> VerificationTag:
    return VerificationTag(polynomial_tag(block, hash_seed), bytes(hash_seed))


def collision_bound(n_bits: int) -> float:
    return max(1, -(-n_bits // 64)) / 2.0**61


def expand_seed(seed: bytes, n_bits: int) -> np.ndarray:
    """Deterministic bit expansion of a short seed (SHAKE-256)."""
    if n_bits <= 0:
        return np.zeros(0, dtype=np.uint8)
    raw = hashlib.shake_256(b"toeplitz" + seed).digest((n_bits + 7) // 8)
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=n_bits)


def toeplitz_matrix(diagonals: np.ndarray, n: int, l: int) -> np.ndarray:
    """Explicit l×n matrix with T[i, j] = diagonals[i - j + n - 1]."""
    i = np.arange(l)[:, None]
    j = np.arange(n)[None, :]
    return np.asarray(diagonals, dtype=np.uint8)[i - j + n - 1]


def toeplitz_hash(block, diagonals, l: int) -> np.ndarray:
    """T·block over GF(2) using an FFT convolution."""
    x = np.asarray(block, dtype=np.uint8) & 1
    n = x.size
    if not 0 <= l <= n:
        raise ValueError(f"output length {l} outside [0, {n}]")
    s = np.asarray(diagonals, dtype=np.uint8) & 1
    if s.size != n + l - 1 and l > 0:
        raise ValueError(f"need {n + l - 1} diagonal bits, got {s.size}")
    if l == 0:
        return np.zeros(0, dtype=np.uint8)
    # y_i = sum_j s[i - j + n - 1] x_j = (s * x)[i + n - 1]
    size = 1 << int(np.ceil(np.log2(s.size + n)))
    conv = np.fft.irfft(np.fft.rfft(s.astype(np.float64), size) * np.fft.rfft(x.astype(np.float64), size), size)
    counts = np.rint(conv[n - 1 : n - 1 + l]).astype(np.int64)
    return (counts & 1).astype(np.uint8)


def privacy_amplify(block, toeplitz_seed: bytes, l: int) -> np.ndarray:
    n = np.asarray(block).size
    if l > n:
        raise ValueError(f"cannot extract {l} bits from {n}")
    return toeplitz_hash(block, expand_seed(toeplitz_seed, n + l - 1), l)


class SeedSource:
    """Source of public hash seeds.

    Without a master seed this draws from the OS CSPRNG. With one it runs a
    SHAKE-256 counter generator so whole runs can be replayed.
    """

    def __init__(self, master_seed: int | None = None, label: str = "postproc"):
        self._key = None if master_seed is None else f"{label}:{master_seed}".encode()
        self._counter = 0

    def draw(self, nbytes: int = SEED_BYTES) -> bytes:
        if self._key is None:
            return secrets.token_bytes(nbytes)
        self._counter += 1
        return hashlib.shake_256(self._key + self._counter.to_bytes(8, "big")).digest(nbytes)
