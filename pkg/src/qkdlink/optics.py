"""Photon-level Monte Carlo of the two-pass phase-encoded quantum channel.

The auto-compensating optics are reduced to their observable effect: a
Poissonian pulse of mean ``mu`` leaves Alice, survives the fibre and the
detector with probability ``T*eta`` per photon, and interferes at Bob's
detectors with contrast ``visibility``. Two threshold detectors (D0, D1)
each add independent dark counts per gate.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from qkdlink.core import PhaseChoice, PhaseChoices, SlotId, stream

# uniforms per slot; two Philox 4x64 blocks so every slot is addressable
_U_PER_SLOT = 8
_U_SURVIVE, _U_ROUTE, _U_DARK0, _U_DARK1, _U_RESOLVE, _U_EXCESS = range(6)


class Click(enum.IntEnum):
    NONE = 0
    D0 = 1
    D1 = 2
    BOTH = 3


@dataclass(frozen=True)
class LinkParams:
    mu: float
    channel_loss_db: float
    detector_efficiency: float
    dark_count_prob: float
    visibility: float
    dead_time_slots: int = 0
    pulse_rate_hz: float = 10e6
    # extra probability that a signal photon lands on the wrong detector;
    # stands in for an eavesdropper's disturbance
    excess_error: float = 0.0

    def __post_init__(self):
        if not self.mu >= 0:
            raise ValueError("mu must be non-negative")
        if not self.channel_loss_db >= 0:
            raise ValueError("channel loss must be non-negative")
        for name in ("detector_efficiency", "dark_count_prob", "visibility", "excess_error"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.dead_time_slots < 0:
            raise ValueError("dead_time_slots must be non-negative")
        if not self.pulse_rate_hz > 0:
            raise ValueError("pulse_rate_hz must be positive")

    def with_(self, **changes) -> "LinkParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class DetectionOutcome:
    slot: SlotId
    click: Click


def transmittance(loss_db: float) -> float:
    if loss_db < 0:
        raise ValueError("loss must be non-negative")
    return 10.0 ** (-loss_db / 10.0)


def signal_probability(params: LinkParams) -> float:
    """Probability that at least one photon reaches a detector and registers."""
    return -math.expm1(-params.mu * transmittance(params.channel_loss_db) * params.detector_efficiency)


def click_probability(params: LinkParams) -> float:
    p_sig = signal_probability(params)
    p_dark = 1.0 - (1.0 - params.dark_count_prob) ** 2
    return p_sig + p_dark - p_sig * p_dark


def _wrong_route_probability(params: LinkParams) -> float:
    base = (1.0 - params.visibility) / 2
    x = params.excess_error
    return base * (1 - x) + (1 - base) * x


def expected_qber(params: LinkParams) -> float:
    """Exact sifted error rate for matched bases and zero dead time.

    Double clicks count as an error half the time.
    """
    s = signal_probability(params)
    d = params.dark_count_prob
    w = _wrong_route_probability(params)
    p_err = (1 - s) * (d * (1 - d) + 0.5 * d * d) + s * (1 - w) * 0.5 * d + s * w * (1 - 0.5 * d)
    p_click = click_probability(params)
    return p_err / p_click if p_click > 0 else 0.0


def excess_for_qber(params: LinkParams, target_qber: float) -> float:
    """Excess routing error that lifts the expected QBER to ``target_qber``.

    The QBER is affine in ``excess_error``, so two evaluations pin it.
    """
    q0 = expected_qber(params.with_(excess_error=0.0))
    q_half = expected_qber(params.with_(excess_error=0.5))
    if target_qber <= q0:
        return 0.0
    if target_qber >= q_half:
        raise ValueError(f"target QBER {target_qber} unreachable (max {q_half:.4f})")
    return 0.5 * (target_qber - q0) / (q_half - q0)


def _detector_clicks(u: np.ndarray, cos_delta: np.ndarray, params: LinkParams):
    """Map per-slot uniforms to raw click codes (vectorized)."""
    p_sig = signal_probability(params)
    d = params.dark_count_prob
    signal = u[:, _U_SURVIVE] < p_sig
    to_d0 = u[:, _U_ROUTE] < (1 + params.visibility * cos_delta) / 2
    to_d0 ^= u[:, _U_EXCESS] < params.excess_error
    dark0 = u[:, _U_DARK0] < d
    dark1 = u[:, _U_DARK1] < d
    fire0 = (signal & to_d0) | dark0
    fire1 = (signal & ~to_d0) | dark1
    return fire0.astype(np.uint8) | (fire1.astype(np.uint8) << 1)


def _cos_delta(alice_phase, bob_phase):
    # exact cosines for the four quarter-turn differences
    steps = np.round((np.asarray(alice_phase) - np.asarray(bob_phase)) / (np.pi / 2)).astype(np.int64) % 4
    return np.array([1.0, 0.0, -1.0, 0.0])[steps]


def _slot_uniforms(seed: int, train_index: int, first: int, count: int) -> np.ndarray:
    rng = stream(seed, "optics", train_index, offset_blocks=2 * first)
    return rng.random((count, _U_PER_SLOT))


def simulate_slot(alice: PhaseChoice, bob: PhaseChoice, params: LinkParams, seed: int, slot: SlotId) -> DetectionOutcome:
    u = _slot_uniforms(seed, slot.train_index, slot.pulse_index, 1)
    cd = _cos_delta([alice.phase], [bob.basis * np.pi / 2])
    code = int(_detector_clicks(u, cd, params)[0])
    return DetectionOutcome(slot, Click(code))


@dataclass
class TrainDetections:
    """Reported clicks of one train after dead time and double-click resolution."""

    train_index: int
    pulses: np.ndarray  # pulse indices, increasing
    bits: np.ndarray  # 0 for D0, 1 for D1
    double: np.ndarray  # True where both detectors fired

    def __len__(self):
        return self.pulses.size

    def outcomes(self) -> list[DetectionOutcome]:
        return [
            DetectionOutcome(SlotId(self.train_index, int(p)), Click.D1 if b else Click.D0)
            for p, b in zip(self.pulses.tolist(), self.bits.tolist())
        ]


def simulate_train(alice: PhaseChoices, bob: PhaseChoices, params: LinkParams, seed: int, train_index: int) -> TrainDetections:
    if len(alice) != len(bob):
        raise ValueError(f"choice length mismatch: alice {len(alice)}, bob {len(bob)}")
    n = len(alice)
    u = _slot_uniforms(seed, train_index, 0, n)
    codes = _detector_clicks(u, _cos_delta(alice.phases(), bob.basis * (np.pi / 2)), params)
    idx = np.flatnonzero(codes)
    if params.dead_time_slots and idx.size > 1:
        keep = []
        blocked_until = -1
        for i in idx.tolist():
            if i > blocked_until:
                keep.append(i)
                blocked_until = i + params.dead_time_slots
        idx = np.asarray(keep, dtype=np.int64)
    c = codes[idx]
    double = c == Click.BOTH
    bits = (c == Click.D1).astype(np.uint8)
    # a double click is kept and assigned to a uniformly random detector
    bits[double] = (u[idx[double], _U_RESOLVE] >= 0.5).astype(np.uint8)
    return TrainDetections(train_index, idx, bits, double)


def run_train(alice_choices, bob_choices, params: LinkParams, seed: int, train_index: int) -> list[DetectionOutcome]:
    """Clicks of one train as outcomes; Both is already resolved."""
    return simulate_train(alice_choices, bob_choices, params, seed, train_index).outcomes()


# Calibrated operating points. The fibre loss and mean photon numbers are
# the reported ones; efficiency, dark counts and visibility are free and
# chosen to land on the reported error rates (see tests/test_presets.py).
PRESETS: dict[str, LinkParams] = {
    "lab": LinkParams(
        mu=0.35,
        channel_loss_db=4.8,
        detector_efficiency=0.1,
        dark_count_prob=2e-5,
        visibility=0.9513,
    ),
    "bank18": LinkParams(
        mu=0.18,
        channel_loss_db=11.7,
        detector_efficiency=0.1,
        dark_count_prob=1.72e-5,
        visibility=0.9110,
    ),
    "bank35": LinkParams(
        mu=0.35,
        channel_loss_db=11.7,
        detector_efficiency=0.1,
        dark_count_prob=1.72e-5,
        visibility=0.9110,
    ),
}
