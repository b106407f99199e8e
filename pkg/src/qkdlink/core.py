"""Domain types, seeded randomness and entropy helpers."""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

MASK64 = (1 << 64) - 1

# Stream-domain tags for the counter-based generator. Each (seed, domain)
# pair keys an independent Philox stream; the counter addresses trains.
DOMAINS = {
    "alice": 0xA11CE,
    "bob": 0xB0B,
    "optics": 0x0971C5,
    "postproc": 0x9057,
}


class Basis(enum.IntEnum):
    Z = 0
    X = 1


@dataclass(frozen=True)
class PhaseChoice:
    basis: Basis
    bit: int = 0

    @property
    def phase(self) -> float:
        """Modulator phase in radians: basis picks pi/2 offset, bit adds pi."""
        return self.basis * math.pi / 2 + self.bit * math.pi


@dataclass(frozen=True, order=True)
class SlotId:
    train_index: int
    pulse_index: int


class PhaseChoices:
    """Array-backed sequence of PhaseChoice for one train."""

    __slots__ = ("basis", "bit")

    def __init__(self, basis, bit):
        self.basis = np.asarray(basis, dtype=np.uint8)
        self.bit = np.asarray(bit, dtype=np.uint8)
        if self.basis.shape != self.bit.shape:
            raise ValueError("basis and bit arrays must have equal shape")

    def __len__(self) -> int:
        return self.basis.size

    def __getitem__(self, i) -> PhaseChoice:
        return PhaseChoice(Basis(int(self.basis[i])), int(self.bit[i]))

    def __iter__(self) -> Iterator[PhaseChoice]:
        for b, v in zip(self.basis.tolist(), self.bit.tolist()):
            yield PhaseChoice(Basis(b), v)

    def __eq__(self, other):
        if not isinstance(other, PhaseChoices):
            return NotImplemented
        return np.array_equal(self.basis, other.basis) and np.array_equal(self.bit, other.bit)

    def phases(self) -> np.ndarray:
        return self.basis * (np.pi / 2) + self.bit * np.pi


def _check_seed(seed: int) -> int:
    if not 0 <= seed <= MASK64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return int(seed)


def stream(seed: int, domain: str, counter: int = 0, offset_blocks: int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, domain), positioned at ``counter``.

    ``counter`` occupies the upper 128 bits of the Philox counter and
    ``offset_blocks`` the lower ones, so one 4x64-bit block can be addressed
    directly without replaying the stream.
    """
    key = (DOMAINS[domain] << 64) | _check_seed(seed)
    ctr = (int(counter) << 128) | int(offset_blocks)
    return np.random.Generator(np.random.Philox(key=key, counter=ctr))


def draw_phase_choices(seed: int, count: int, role: str, train_index: int = 0) -> PhaseChoices:
    """Basis and bit choices for ``count`` pulses of one train.

    Bob's bit field is fixed to 0.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if role not in ("alice", "bob"):
        raise ValueError(f"unknown role {role!r}")
    rng = stream(seed, role, train_index)
    raw = rng.integers(0, 4, size=count, dtype=np.uint8)
    basis = raw >> 1
    bit = raw & 1 if role == "alice" else np.zeros(count, dtype=np.uint8)
    return PhaseChoices(basis, bit)


def binary_entropy(p: float) -> float:
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"probability out of range: {p}")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def pack_bits(bits) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def unpack_bits(data: bytes, count: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=count)


def derive_seed(master: int, *labels) -> int:
    """64-bit child seed of ``master`` for the given labels (e.g. a session id)."""
    text = ":".join([str(_check_seed(master))] + [str(x) for x in labels]).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "big")
