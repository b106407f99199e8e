"""Session orchestration and sifting.

A session is ``trains_per_session`` trains of ``pulses_per_train`` pulses.
Alice modulates every pulse and announces each finished train on the public
channel; Bob measures what arrives over the quantum link. After the last
train Bob reports (slot, basis) for his detections, Alice answers with a
keep-mask and both hold a :class:`SiftedBlock` over the same slots.
"""

from __future__ import annotations

import queue
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from qkdlink import net
from qkdlink.core import PhaseChoice, PhaseChoices, SlotId, draw_phase_choices
from qkdlink.net import MsgType
from qkdlink.optics import PRESETS, Click, LinkParams, simulate_train


@dataclass(frozen=True)
class SessionConfig:
    trains_per_session: int = 1000
    pulses_per_train: int = 2400
    link: LinkParams = PRESETS["lab"]
    session_seed: int = 0

    def __post_init__(self):
        if self.trains_per_session < 1:
            raise ValueError("trains_per_session must be at least 1")
        if self.pulses_per_train < 1:
            raise ValueError("pulses_per_train must be at least 1")

    @property
    def slots(self) -> int:
        return self.trains_per_session * self.pulses_per_train


@dataclass(frozen=True)
class RawRecord:
    slot: SlotId
    choice: PhaseChoice
    click: Click | None = None  # Bob only


@dataclass
class SiftedBlock:
    """Basis-matched bits with their slots, in slot order."""

    bits: np.ndarray
    trains: np.ndarray
    pulses: np.ndarray
    session_id: int = 0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        self.trains = np.asarray(self.trains, dtype=np.int64)
        self.pulses = np.asarray(self.pulses, dtype=np.int64)
        if not (self.bits.size == self.trains.size == self.pulses.size):
            raise ValueError("bits and slots must have equal length")
        if self.bits.size > 1:
            order = self.trains * (1 << 32) + self.pulses
            if np.any(np.diff(order) <= 0):
                raise ValueError("slots must be strictly increasing")

    def __len__(self):
        return self.bits.size

    @property
    def slots(self) -> list[SlotId]:
        return [SlotId(t, p) for t, p in zip(self.trains.tolist(), self.pulses.tolist())]

    def same_slots(self, other: "SiftedBlock") -> bool:
        return np.array_equal(self.trains, other.trains) and np.array_equal(self.pulses, other.pulses)

    @classmethod
    def empty(cls, session_id: int = 0) -> "SiftedBlock":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros(0, dtype=np.uint8), z, z, session_id)


class SiftDesync(LookupError):
    """Bob reported a slot Alice never emitted."""


def sift(bob_detections: Sequence[tuple], alice_choices_at: Mapping[SlotId, PhaseChoice] | Callable[[SlotId], PhaseChoice]):
    """Keep the detections whose basis matches Alice's.

    ``bob_detections`` holds (SlotId, Basis, click) with click D0 or D1.
    Returns (slots, alice_bits, bob_bits) in input order.
    """
    lookup = alice_choices_at.__getitem__ if isinstance(alice_choices_at, Mapping) else alice_choices_at
    slots, a_bits, b_bits = [], [], []
    for slot, basis, click in bob_detections:
        try:
            choice = lookup(slot)
        except (KeyError, IndexError) as exc:
            raise SiftDesync(f"unknown slot {slot}") from exc
        if choice.basis != basis:
            continue
        slots.append(slot)
        a_bits.append(int(choice.bit))
        b_bits.append(0 if Click(click) == Click.D0 else 1)
    return slots, np.array(a_bits, dtype=np.uint8), np.array(b_bits, dtype=np.uint8)


def sift_mask(alice_basis: np.ndarray, trains: np.ndarray, pulses: np.ndarray, bob_basis: np.ndarray) -> np.ndarray:
    """Vectorized keep-mask; ``alice_basis`` is (trains, pulses)."""
    n_trains, n_pulses = alice_basis.shape
    if trains.size and (trains.max() >= n_trains or pulses.max() >= n_pulses):
        raise SiftDesync("detection outside the session's slot range")
    return alice_basis[trains, pulses] == bob_basis


# -- quantum link --------------------------------------------------------------


class MemoryFiber:
    """One-way in-process link carrying Alice's modulated trains to Bob."""

    def __init__(self, timeout: float | None = 60.0):
        self._q: queue.Queue = queue.Queue()
        self.timeout = timeout

    def send(self, train_index: int, choices: PhaseChoices):
        self._q.put((train_index, choices))

    def receive(self) -> tuple[int, PhaseChoices]:
        try:
            item = self._q.get(timeout=self.timeout)
        except queue.Empty:
            raise net.ChannelTimeout("quantum link timed out") from None
        if item is None:
            raise net.TransportError("quantum link closed")
        return item

    def close(self):
        self._q.put(None)


_FIBER_HEAD = struct.Struct(">II")


class StreamFiber:
    """Quantum link over a byte stream: per train a header and one phase index per pulse."""

    def __init__(self, stream):
        self.stream = stream

    def send(self, train_index: int, choices: PhaseChoices):
        body = (choices.basis | (choices.bit << 1)).astype(np.uint8).tobytes()
        self.stream.write(_FIBER_HEAD.pack(train_index, len(body)) + body)

    def receive(self) -> tuple[int, PhaseChoices]:
        t, n = _FIBER_HEAD.unpack(self.stream.read_exact(_FIBER_HEAD.size))
        raw = np.frombuffer(self.stream.read_exact(n), dtype=np.uint8)
        return t, PhaseChoices(raw & 1, raw >> 1)

    def close(self):
        self.stream.close()


# -- endpoint sessions ---------------------------------------------------------


def alice_session(conv: net.Conversation, fiber, config: SessionConfig, session_id: int) -> SiftedBlock:
    """Alice's side of one session; returns her sifted block."""
    T, P = config.trains_per_session, config.pulses_per_train
    conv.session_id = session_id
    conv.send(MsgType.SESSION_START, net.encode_session_start(T, P))
    basis = np.empty((T, P), dtype=np.uint8)
    bits = np.empty((T, P), dtype=np.uint8)
    for t in range(T):
        ch = draw_phase_choices(config.session_seed, P, "alice", t)
        basis[t], bits[t] = ch.basis, ch.bit
        fiber.send(t, ch)
        conv.send(MsgType.TRAIN_DONE, net.encode_u32(t))
    frame = conv.receive(MsgType.DETECTIONS)
    trains, pulses, bob_basis = net.decode_detections(frame.payload)
    try:
        keep = sift_mask(basis, trains, pulses, bob_basis)
    except SiftDesync as exc:
        conv.abort(str(exc), code=4)
        raise
    conv.send(MsgType.SIFT_MASK, net.encode_mask(keep))
    return SiftedBlock(bits[trains[keep], pulses[keep]], trains[keep], pulses[keep], session_id)


@dataclass
class BobTrainLog:
    """Bob's raw record for one session (detected slots only)."""

    trains: list = field(default_factory=list)
    pulses: list = field(default_factory=list)
    bits: list = field(default_factory=list)
    basis: list = field(default_factory=list)
    double_clicks: int = 0

    def add(self, t: int, det, bob: PhaseChoices):
        self.trains.append(np.full(det.pulses.size, t, dtype=np.int64))
        self.pulses.append(det.pulses)
        self.bits.append(det.bits)
        self.basis.append(bob.basis[det.pulses])
        self.double_clicks += int(det.double.sum())

    def arrays(self):
        cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt)  # noqa: E731
        return cat(self.trains, np.int64), cat(self.pulses, np.int64), cat(self.bits, np.uint8), cat(self.basis, np.uint8)


def bob_session(conv: net.Conversation, fiber, link: LinkParams, session_seed: int, start: net.Frame) -> tuple[SiftedBlock, int]:
    """Bob's side of one session, starting from the received SESSION_START.

    Returns his sifted block and the number of raw detections.
    """
    T, P = net.decode_session_start(start.payload)
    conv.session_id = start.session_id
    log = BobTrainLog()
    for expect in range(T):
        frame = conv.receive(MsgType.TRAIN_DONE)
        t = net.decode_u32(frame.payload)
        ft, alice = fiber.receive()
        if t != expect or ft != t or len(alice) != P:
            conv.abort(f"train {t} out of step (expected {expect}, link has {ft})", code=4)
            raise net.ProtocolViolation("train sequence desynchronised")
        bob = draw_phase_choices(session_seed, P, "bob", t)
        log.add(t, simulate_train(alice, bob, link, session_seed, t), bob)
    trains, pulses, bits, basis = log.arrays()
    conv.send(MsgType.DETECTIONS, net.encode_detections(trains, pulses, basis))
    keep = net.decode_mask(conv.receive(MsgType.SIFT_MASK).payload)
    if keep.size != trains.size:
        conv.abort("mask length mismatch", code=4)
        raise net.ProtocolViolation("SIFT_MASK length differs from DETECTIONS")
    return SiftedBlock(bits[keep], trains[keep], pulses[keep], start.session_id), int(trains.size)


def run_session(config: SessionConfig, channels=None, fiber=None, session_id: int = 1) -> tuple[SiftedBlock, SiftedBlock]:
    """Run one session with both endpoints in this process.

    Bob runs on a worker thread. Either both blocks are returned or the
    first error is raised.
    """
    a_ch, b_ch = channels if channels is not None else net.memory_channels()
    link = fiber if fiber is not None else MemoryFiber()
    a_conv, b_conv = net.Conversation(a_ch, net.ALICE), net.Conversation(b_ch, net.BOB)
    a_conv.state = b_conv.state = "idle"
    out: dict = {}

    def bob():
        try:
            start = b_conv.receive(MsgType.SESSION_START)
            out["bob"] = bob_session(b_conv, link, config.link, config.session_seed, start)[0]
        except BaseException as exc:
            out["bob_error"] = exc
            b_conv.abort(f"bob failed: {exc}")

    worker = threading.Thread(target=bob, daemon=True)
    worker.start()
    try:
        alice_block = alice_session(a_conv, link, config, session_id)
    except BaseException as exc:
        a_ch.close()
        worker.join()
        # Alice's error is usually the echo of Bob's abort
        if "bob_error" in out:
            raise out["bob_error"] from exc
        raise
    worker.join()
    if "bob_error" in out:
        raise out["bob_error"]
    return alice_block, out["bob"]

