import cmath
import math

import numpy as np
import pytest

from hybridqkd.errors import InvariantViolationError
from hybridqkd.modes import (
    FREE,
    LinearMap,
    ModeLabel,
    apply_local_map,
    build_state,
    compose_maps,
    outcome_probabilities,
)
from hybridqkd.optics import (
    CH_B_XM,
    CH_B_XP,
    CH_B_Z,
    DecoderConfig,
    TransformerConfig,
    format_transformer_map,
    guide_delay_seconds,
    hwp_map,
    pbs_analyzer_map,
    plc_decoder_map,
    polarizer_map,
)


def rule_dict(lmap, label):
    return {out: coeff for out, coeff in lmap.rules[label]}


def test_polarizer_45_splits_h_equally():
    outs = rule_dict(polarizer_map(45.0), ModeLabel("A", 0, "H"))
    assert outs[ModeLabel("A", 0, "H")] == pytest.approx(0.5, abs=1e-12)
    assert outs[ModeLabel("A", 0, "V")] == pytest.approx(0.5, abs=1e-12)


def test_polarizer_0_transmits_h_unchanged():
    outs = rule_dict(polarizer_map(0.0), ModeLabel("A", 1, "H"))
    assert outs == {ModeLabel("A", 1, "H"): pytest.approx(1.0)}


def test_polarizer_90_blocks_h():
    assert polarizer_map(90.0).rules[ModeLabel("A", 1, "H")] == ()


def test_hwp_225_mixes_equally():
    lmap = hwp_map(22.5)
    h_outs = rule_dict(lmap, ModeLabel("A", 0, "H"))
    v_outs = rule_dict(lmap, ModeLabel("A", 0, "V"))
    s = 1 / math.sqrt(2)
    assert h_outs[ModeLabel("A", 0, "H")] == pytest.approx(s, abs=1e-12)
    assert h_outs[ModeLabel("A", 0, "V")] == pytest.approx(s, abs=1e-12)
    assert v_outs[ModeLabel("A", 0, "H")] == pytest.approx(s, abs=1e-12)
    assert v_outs[ModeLabel("A", 0, "V")] == pytest.approx(-s, abs=1e-12)


def test_hwp_0_flips_v_sign():
    lmap = hwp_map(0.0)
    assert rule_dict(lmap, ModeLabel("A", 2, "H"))[ModeLabel("A", 2, "H")] == 1.0
    assert rule_dict(lmap, ModeLabel("A", 2, "V"))[ModeLabel("A", 2, "V")] == -1.0


def test_hwp_squares_to_identity():
    for angle in (0.0, 22.5, 30.0, 67.5):
        twice = compose_maps(hwp_map(angle), hwp_map(angle))
        for label, outs in twice.rules.items():
            outs = dict(outs)
            assert outs[label] == pytest.approx(1.0, abs=1e-12)
            assert len(outs) == 1


def test_ideal_transformer_splits_slot0_h():
    cfg = TransformerConfig(excess_loss_db=0.0)
    outs = rule_dict(format_transformer_map(cfg), ModeLabel("A", 0, "H"))
    assert outs[ModeLabel("A", 0, "H")] == pytest.approx(0.5, abs=1e-12)
    assert outs[ModeLabel("A", 1, "V")] == pytest.approx(0.5, abs=1e-12)
    assert len(outs) == 2


def test_transformer_excess_loss_scale():
    ideal = format_transformer_map(TransformerConfig(excess_loss_db=0.0))
    lossy = format_transformer_map(TransformerConfig(excess_loss_db=1.5))
    g = 10 ** (-1.5 / 20)
    assert g == pytest.approx(0.8414, abs=5e-5)
    for label in ideal.rules:
        for (out_i, c_i), (out_l, c_l) in zip(ideal.rules[label], lossy.rules[label]):
            assert out_i == out_l
            assert c_l == pytest.approx(c_i * g, abs=1e-12)
    # total power factor is the quoted -1.5 dB
    row = lossy.row_power(ModeLabel("A", 0, "H"))
    ideal_row = ideal.row_power(ModeLabel("A", 0, "H"))
    assert row / ideal_row == pytest.approx(10 ** (-0.15), abs=1e-9)
    assert 10 ** (-0.15) == pytest.approx(0.708, abs=5e-4)


def test_transformer_extinction_leaks_into_other_path():
    cfg = TransformerConfig(excess_loss_db=0.0, glan_extinction_ratio=100.0)
    outs = rule_dict(format_transformer_map(cfg), ModeLabel("A", 0, None))
    # leaked H rides the fiber delay, leaked V exits direct, both at 1/10
    # of the main amplitudes (before the common normalization)
    main_h = outs[ModeLabel("A", 0, "H")]
    leak_h = outs[ModeLabel("A", 1, "H")]
    main_v = outs[ModeLabel("A", 1, "V")]
    leak_v = outs[ModeLabel("A", 0, "V")]
    assert leak_h / main_h == pytest.approx(0.1, abs=1e-12)
    assert leak_v / main_v == pytest.approx(0.1, abs=1e-12)


def test_transformer_reproduces_polarization_entangled_form():
    # run the two-bin source state through the ideal transformer and keep
    # Alice's central slot: amplitudes must be proportional to
    # {H (x) second-bin, e^{i dtheta} V (x) first-bin} with equal weights
    dtheta = 0.813
    state = build_state(
        {
            (ModeLabel("A", 0), ModeLabel("B", 0)): 1 / math.sqrt(2),
            (ModeLabel("A", 1), ModeLabel("B", 1)): cmath.exp(1j * dtheta)
            / math.sqrt(2),
        }
    )
    out = apply_local_map(
        state, format_transformer_map(TransformerConfig(excess_loss_db=0.0))
    )
    central = {
        (la, lb): amp
        for (la, lb), amp in out.amplitudes.items()
        if la.slot == 1
    }
    assert len(central) == 2
    amp_h = central[(ModeLabel("A", 1, "H"), ModeLabel("B", 1))]
    amp_v = central[(ModeLabel("A", 1, "V"), ModeLabel("B", 0))]
    assert abs(amp_h) == pytest.approx(abs(amp_v), abs=1e-12)
    # relative phase of the V term w.r.t. the H term is -dtheta, i.e. the
    # first-bin component carries the conjugate pump phase
    rel = amp_v / amp_h
    assert cmath.phase(rel) == pytest.approx(-dtheta, abs=1e-12)


def test_decoder_rows_lossless_and_balanced():
    for r in (0.0, 0.3, 0.5, 1.0):
        for phi in (0.0, 0.7, math.pi):
            lmap = plc_decoder_map(DecoderConfig(phase_phi=phi, z_branch_ratio=r))
            for label in lmap.rules:
                assert lmap.row_power(label) == pytest.approx(1.0, abs=1e-12)


def test_decoder_fringe_law_against_enumeration():
    # brute-force amplitude enumeration over the two paths reaching the
    # central slot of each interferometer port, checked for a grid of
    # splitting ratios, circuit phases and input qubit phases.
    for r in (0.25, 0.5, 0.9):
        for phi in (0.0, 0.9, 2.4):
            for delta in (0.0, 1.1, math.pi):
                lmap = plc_decoder_map(DecoderConfig(phase_phi=phi, z_branch_ratio=r))
                # logical |1> is the first bin (slot 0), |0> the second (slot 1);
                # the input (|0> + e^{i delta} |1>)/sqrt(2)
                state = build_state(
                    {
                        (ModeLabel("A", 0, "H", "A.Z0"), ModeLabel("B", 1)): 1
                        / math.sqrt(2),
                        (ModeLabel("A", 0, "H", "A.Z0"), ModeLabel("B", 0)): cmath.exp(
                            1j * delta
                        )
                        / math.sqrt(2),
                    }
                )
                table = outcome_probabilities(apply_local_map(state, lmap))
                got = table.entries.get(("A.Z0", 0, CH_B_XP, 1), 0.0)
                # short path from slot 1 interferes with delayed path from slot 0
                expected = (r / 8.0) * abs(1 + cmath.exp(1j * (phi + delta))) ** 2
                assert got == pytest.approx(expected, abs=1e-12)
                got_m = table.entries.get(("A.Z0", 0, CH_B_XM, 1), 0.0)
                expected_m = (r / 8.0) * abs(1 - cmath.exp(1j * (phi + delta))) ** 2
                assert got_m == pytest.approx(expected_m, abs=1e-12)


def test_decoder_equal_bins_phi0():
    lmap = plc_decoder_map(DecoderConfig(phase_phi=0.0, z_branch_ratio=0.5))
    state = build_state(
        {
            (ModeLabel("A", 0, "H", "A.Z0"), ModeLabel("B", 0)): 1 / math.sqrt(2),
            (ModeLabel("A", 0, "H", "A.Z0"), ModeLabel("B", 1)): 1 / math.sqrt(2),
        }
    )
    table = outcome_probabilities(apply_local_map(state, lmap))
    assert table.entries.get(("A.Z0", 0, CH_B_XP, 1), 0.0) == pytest.approx(
        0.25, abs=1e-12
    )
    assert table.entries.get(("A.Z0", 0, CH_B_XM, 1), 0.0) == pytest.approx(
        0.0, abs=1e-12
    )


def test_decoder_phi_pi_swaps_ports():
    base = DecoderConfig(phase_phi=0.0, z_branch_ratio=0.5)
    flipped = DecoderConfig(phase_phi=math.pi, z_branch_ratio=0.5)
    state = build_state(
        {
            (ModeLabel("A", 0, "H", "A.Z0"), ModeLabel("B", 0)): 1 / math.sqrt(2),
            (ModeLabel("A", 0, "H", "A.Z0"), ModeLabel("B", 1)): 1 / math.sqrt(2),
        }
    )
    t0 = outcome_probabilities(apply_local_map(state, plc_decoder_map(base)))
    t1 = outcome_probabilities(apply_local_map(state, plc_decoder_map(flipped)))
    assert t1.entries.get(("A.Z0", 0, CH_B_XM, 1), 0.0) == pytest.approx(
        t0.entries.get(("A.Z0", 0, CH_B_XP, 1), 0.0), abs=1e-12
    )
    assert t1.entries.get(("A.Z0", 0, CH_B_XP, 1), 0.0) == pytest.approx(
        t0.entries.get(("A.Z0", 0, CH_B_XM, 1), 0.0), abs=1e-12
    )


def test_pbs_z_basis_routes_by_polarization():
    lmap = pbs_analyzer_map("Z")
    outs = rule_dict(lmap, ModeLabel("A", 1, "H"))
    assert list(outs) == [ModeLabel("A", 1, "H", "A.Z0")]
    outs = rule_dict(lmap, ModeLabel("A", 1, "V"))
    assert list(outs) == [ModeLabel("A", 1, "V", "A.Z1")]


def test_pbs_x_basis_eigenstates():
    lmap = pbs_analyzer_map("X")
    state = build_state(
        {
            (ModeLabel("A", 1, "H"), ModeLabel("B", 1, None, "B.Zdir")): 0.5,
            (ModeLabel("A", 1, "V"), ModeLabel("B", 1, None, "B.Zdir")): 0.5,
        }
    )
    table = outcome_probabilities(apply_local_map(state, lmap))
    assert table.entries.get(("A.X+", 1, "B.Zdir", 1), 0.0) == pytest.approx(
        0.5, abs=1e-12
    )
    assert ("A.X-", 1, "B.Zdir", 1) not in table.entries


def test_pbs_x_basis_h_input_splits():
    lmap = pbs_analyzer_map("X")
    state = build_state(
        {(ModeLabel("A", 1, "H"), ModeLabel("B", 1, None, "B.Zdir")): 1.0}
    )
    table = outcome_probabilities(apply_local_map(state, lmap))
    assert table.entries[("A.X+", 1, "B.Zdir", 1)] == pytest.approx(0.5, abs=1e-12)
    assert table.entries[("A.X-", 1, "B.Zdir", 1)] == pytest.approx(0.5, abs=1e-12)


def test_all_constructors_subunitary_random_params():
    rng = np.random.default_rng(11)
    for _ in range(30):
        angle = rng.uniform(0, 180)
        polarizer_map(angle)
        hwp_map(angle)
        cfg = TransformerConfig(
            polarizer_angle_deg=rng.uniform(0, 90),
            excess_loss_db=rng.uniform(0, 3),
            pm_fiber_transmission=rng.uniform(0.1, 1.0),
            glan_extinction_ratio=rng.uniform(2, 1e7),
        )
        format_transformer_map(cfg)  # constructor validates rows
        dcfg = DecoderConfig(
            phase_phi=rng.uniform(0, 2 * math.pi),
            z_branch_ratio=rng.uniform(0, 1),
            insertion_loss_db=rng.uniform(0, 3),
        )
        plc_decoder_map(dcfg)


def test_config_invariants_enforced():
    with pytest.raises(InvariantViolationError):
        TransformerConfig(excess_loss_db=-0.1)
    with pytest.raises(InvariantViolationError):
        TransformerConfig(glan_extinction_ratio=0.5)
    with pytest.raises(InvariantViolationError):
        DecoderConfig(z_branch_ratio=1.5)


def test_guide_delay_matches_spiral_length():
    assert guide_delay_seconds(0.50, 1.50) == pytest.approx(2.50e-9, rel=1e-2)
