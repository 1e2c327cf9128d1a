import cmath
import math

import numpy as np
import pytest

from hybridqkd.errors import (
    DuplicateLabelError,
    EmptyStateError,
    MapNotSubnormalizedError,
    MapPartyMismatchError,
    NotSubnormalizedError,
    UnresolvedChannelError,
)
from hybridqkd.modes import (
    FREE,
    JointState,
    LinearMap,
    ModeLabel,
    apply_local_map,
    build_state,
    compose_maps,
    format_state,
    identity_map,
    outcome_probabilities,
    phase_shifted,
)

A0 = ModeLabel("A", 0)
A1 = ModeLabel("A", 1)
B0 = ModeLabel("B", 0)
B1 = ModeLabel("B", 1)


def two_bin_state(delta_theta=0.0):
    return build_state(
        {
            (A0, B0): 1 / math.sqrt(2),
            (A1, B1): cmath.exp(1j * delta_theta) / math.sqrt(2),
        }
    )


def test_build_state_two_bins_is_normalized():
    state = two_bin_state(0.7)
    assert state.norm_sq == pytest.approx(1.0, abs=1e-12)


def test_build_state_rejects_empty():
    with pytest.raises(EmptyStateError):
        build_state({})


def test_build_state_rejects_supernormalized():
    with pytest.raises(NotSubnormalizedError):
        build_state({(A0, B0): 1.1})


def test_build_state_rejects_duplicates():
    with pytest.raises(DuplicateLabelError):
        build_state([((A0, B0), 0.5), ((A0, B0), 0.5)])


def test_build_state_rejects_same_party_pair():
    with pytest.raises(ValueError):
        build_state({(A0, A1): 1.0})


def test_build_state_normalizes_label_order():
    state = build_state({(B0, A0): 1.0})
    assert list(state.amplitudes) == [(A0, B0)]


def test_identity_map_is_bit_exact():
    state = two_bin_state(1.234)
    out = apply_local_map(state, identity_map("A"))
    assert out.amplitudes == state.amplitudes


def test_uniform_loss_halves_norm():
    state = two_bin_state(0.0)
    rules = {
        lab: ((lab, math.sqrt(0.5)),)
        for lab in (A0, A1, ModeLabel("A", 2))
    }
    out = apply_local_map(state, LinearMap("A", rules))
    assert out.norm_sq == pytest.approx(0.5 * state.norm_sq, abs=1e-15)


def test_destructive_interference_cancels():
    state = build_state({(A0, B0): 0.5, (A1, B0): 0.5})
    merge = LinearMap(
        "A",
        {
            A0: ((ModeLabel("A", 2), 1.0),),
            A1: ((ModeLabel("A", 2), -1.0),),
        },
    )
    out = apply_local_map(state, merge)
    assert out.amplitudes == {}


def test_map_party_mismatch_rejected():
    with pytest.raises(MapPartyMismatchError):
        LinearMap("A", {B0: ((B1, 1.0),)})


def test_map_not_subnormalized_rejected():
    with pytest.raises(MapNotSubnormalizedError):
        LinearMap("A", {A0: ((A0, 1.0), (A1, 0.5))})


def test_outcome_probabilities_requires_channels():
    with pytest.raises(UnresolvedChannelError):
        outcome_probabilities(two_bin_state())


def test_outcome_probabilities_equatorial_state():
    # the fully analyzed correlated state: two equal amplitudes on the
    # matching analyzer ports, nothing on the crossed ones
    xp_a = ModeLabel("A", 1, "H", "A.X+")
    xm_a = ModeLabel("A", 1, "V", "A.X-")
    xp_b = ModeLabel("B", 1, None, "B.X+")
    xm_b = ModeLabel("B", 1, None, "B.X-")
    state = build_state(
        {(xp_a, xp_b): 1 / math.sqrt(2), (xm_a, xm_b): 1 / math.sqrt(2)}
    )
    table = outcome_probabilities(state)
    assert table.entries[("A.X+", 1, "B.X+", 1)] == pytest.approx(0.5, abs=1e-12)
    assert table.entries[("A.X-", 1, "B.X-", 1)] == pytest.approx(0.5, abs=1e-12)
    assert ("A.X+", 1, "B.X-", 1) not in table.entries
    assert table.loss_prob == pytest.approx(0.0, abs=1e-12)


def test_outcome_probabilities_tracks_loss():
    la = ModeLabel("A", 0, "H", "A.Z0")
    lb = ModeLabel("B", 0, None, "B.Zdir")
    table = outcome_probabilities(build_state({(la, lb): 0.5}))
    assert sum(table.entries.values()) == pytest.approx(0.25, abs=1e-12)
    assert table.loss_prob == pytest.approx(0.75, abs=1e-12)
    assert table.total() == pytest.approx(1.0, abs=1e-12)


def test_global_phase_invariance():
    state = two_bin_state(0.3)
    analyzer = LinearMap(
        "A",
        {
            A0: ((ModeLabel("A", 0, "H", "A.Z0"), 1.0),),
            A1: ((ModeLabel("A", 1, "H", "A.Z0"), 1.0),),
        },
    )
    bob = LinearMap(
        "B",
        {
            B0: ((ModeLabel("B", 0, None, "B.Zdir"), 1.0),),
            B1: ((ModeLabel("B", 1, None, "B.Zdir"), 1.0),),
        },
    )
    base = outcome_probabilities(
        apply_local_map(apply_local_map(state, analyzer), bob)
    )
    for alpha in np.linspace(0.0, 2 * math.pi, 7):
        rotated = phase_shifted(state, float(alpha))
        table = outcome_probabilities(
            apply_local_map(apply_local_map(rotated, analyzer), bob)
        )
        assert set(table.entries) == set(base.entries)
        for key, p in base.entries.items():
            assert table.entries[key] == pytest.approx(p, abs=1e-12)


def test_subnormalization_never_increases(rng=np.random.default_rng(7)):
    for _ in range(25):
        amps = rng.normal(size=4) + 1j * rng.normal(size=4)
        amps /= max(1.0, np.sqrt((abs(amps) ** 2).sum())) * 1.0000001
        state = build_state(
            {
                (A0, B0): amps[0],
                (A0, B1): amps[1],
                (A1, B0): amps[2],
                (A1, B1): amps[3],
            }
        )
        # random scaled unitary covering every occupied input label
        theta = rng.uniform(0, 2 * math.pi)
        phi = rng.uniform(0, 2 * math.pi)
        scale = rng.uniform(0.2, 1.0)
        u00 = scale * math.cos(theta)
        u01 = scale * math.sin(theta) * cmath.exp(1j * phi)
        u10 = -scale * math.sin(theta) * cmath.exp(-1j * phi)
        u11 = scale * math.cos(theta)
        rules = {
            A0: ((ModeLabel("A", 1), u00), (ModeLabel("A", 2), u01)),
            A1: ((ModeLabel("A", 1), u10), (ModeLabel("A", 2), u11)),
        }
        out = apply_local_map(state, LinearMap("A", rules))
        assert out.norm_sq <= state.norm_sq + 1e-12


def test_lossless_map_preserves_norm():
    theta = 0.9273
    rules = {
        A0: (
            (ModeLabel("A", 1), math.cos(theta)),
            (ModeLabel("A", 2), math.sin(theta)),
        ),
        A1: ((ModeLabel("A", 0), 1.0),),
    }
    lossless = LinearMap("A", rules)
    assert lossless.is_lossless()
    state = two_bin_state(0.4)
    out = apply_local_map(state, lossless)
    assert out.norm_sq == pytest.approx(state.norm_sq, abs=1e-12)


def test_composition_matches_sequential_application():
    m1 = LinearMap(
        "A",
        {
            A0: ((A0, 0.6), (A1, 0.8)),
            A1: ((A0, 0.8), (A1, -0.6)),
        },
    )
    m2 = LinearMap(
        "A",
        {
            A0: ((ModeLabel("A", 2), 1.0),),
            A1: ((A1, 0.5),),
        },
    )
    state = two_bin_state(1.1)
    sequential = apply_local_map(apply_local_map(state, m1), m2)
    composed = apply_local_map(state, compose_maps(m2, m1))
    assert set(sequential.amplitudes) == set(composed.amplitudes)
    for key, amp in sequential.amplitudes.items():
        assert composed.amplitudes[key] == pytest.approx(amp, abs=1e-12)


def test_format_state_renders_rows():
    text = format_state(two_bin_state(0.0))
    assert "A:s0:-:free" in text
    assert "norm^2 = 1.0" in text
