import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdlink.core import (
    Basis,
    PhaseChoice,
    PhaseChoices,
    SlotId,
    binary_entropy,
    derive_seed,
    draw_phase_choices,
    stream,
)


def test_entropy_endpoints():
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(0.5) == 1.0


def test_entropy_at_eleven_percent():
    assert binary_entropy(0.11) == pytest.approx(0.4999, abs=1e-4)


@pytest.mark.parametrize("p", [-1e-9, 1.0000001, float("nan"), 2.0])
def test_entropy_domain(p):
    with pytest.raises(ValueError):
        binary_entropy(p)


@given(st.floats(0.0, 1.0))
def test_entropy_symmetric(p):
    assert binary_entropy(p) == pytest.approx(binary_entropy(1 - p), abs=1e-12)


def test_entropy_concave_on_grid():
    grid = np.linspace(0, 1, 41)
    for a in grid:
        for b in grid:
            assert binary_entropy((a + b) / 2) >= (binary_entropy(a) + binary_entropy(b)) / 2 - 1e-12


def test_phase_mapping():
    phases = {PhaseChoice(Basis(b), v).phase for b in (0, 1) for v in (0, 1)}
    assert sorted(phases) == pytest.approx([0, math.pi / 2, math.pi, 3 * math.pi / 2])
    assert {PhaseChoice(Basis(b)).phase for b in (0, 1)} == {0.0, math.pi / 2}


def test_slot_order():
    assert SlotId(0, 5) < SlotId(1, 0) < SlotId(1, 1)
    assert sorted([SlotId(2, 0), SlotId(0, 9), SlotId(0, 1)]) == [SlotId(0, 1), SlotId(0, 9), SlotId(2, 0)]


def test_draw_empty():
    assert len(draw_phase_choices(1, 0, "alice")) == 0


def test_draw_deterministic():
    a = draw_phase_choices(99, 8, "alice")
    b = draw_phase_choices(99, 8, "alice")
    assert a == b
    assert list(a) == list(b)
    assert draw_phase_choices(100, 64, "alice") != a


def test_bob_bit_fixed():
    ch = draw_phase_choices(5, 1000, "bob")
    assert not ch.bit.any()
    assert set(np.unique(ch.basis)) == {0, 1}


def test_alice_phase_frequencies():
    ch = draw_phase_choices(2024, 100_000, "alice")
    idx = ch.basis * 2 + ch.bit
    freq = np.bincount(idx, minlength=4) / idx.size
    assert np.all(np.abs(freq - 0.25) < 0.01)
    # chi-square with 3 dof; 16.27 is the 0.999 quantile
    counts = np.bincount(idx, minlength=4)
    chi2 = float(((counts - 25_000) ** 2 / 25_000).sum())
    assert chi2 < 16.27


def test_roles_independent():
    n = 100_000
    a = draw_phase_choices(7, n, "alice").basis.astype(float)
    b = draw_phase_choices(7, n, "bob").basis.astype(float)
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 4 / math.sqrt(n)
    # basis agreement is the sifting probability
    assert abs(np.mean(a == b) - 0.5) < 4 * 0.5 / math.sqrt(n)


def test_trains_independent_and_recomputable():
    t3 = draw_phase_choices(11, 500, "alice", train_index=3)
    assert t3 == draw_phase_choices(11, 500, "alice", train_index=3)
    assert t3 != draw_phase_choices(11, 500, "alice", train_index=4)


def test_stream_offset_addresses_blocks():
    # block k of a train is reachable without drawing blocks 0..k-1
    full = stream(5, "optics", 2).random(40)
    tail = stream(5, "optics", 2, offset_blocks=4).random(24)
    assert np.array_equal(full[16:], tail)


def test_seed_range():
    with pytest.raises(ValueError):
        stream(-1, "alice")
    with pytest.raises(ValueError):
        stream(1 << 64, "alice")
    stream((1 << 64) - 1, "alice")


def test_draw_rejects_bad_role():
    with pytest.raises(ValueError):
        draw_phase_choices(1, 4, "eve")
    with pytest.raises(ValueError):
        draw_phase_choices(1, -1, "alice")


def test_derive_seed():
    s = derive_seed(42, "session", 1)
    assert 0 <= s < 1 << 64
    assert s == derive_seed(42, "session", 1)
    assert s != derive_seed(42, "session", 2)
    assert s != derive_seed(43, "session", 1)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), max_size=50))
def test_phase_choices_roundtrip(pairs):
    basis = [p[0] for p in pairs]
    bits = [p[1] for p in pairs]
    ch = PhaseChoices(basis, bits)
    assert len(ch) == len(pairs)
    assert [(c.basis, c.bit) for c in ch] == pairs
    assert np.allclose(ch.phases(), [PhaseChoice(Basis(b), v).phase for b, v in pairs])
