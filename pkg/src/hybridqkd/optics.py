"""Linear-map constructors for every optical component in the link.

Alice's side: a 45-degree polarizer feeding a polarization-splitting
delay loop (the time-bin to polarization format transformer), a half wave
plate, and a polarizing beam splitter analyzer.  Bob's side: a planar
lightwave circuit that splits between a direct timing branch and an
asymmetric Mach-Zehnder with two interferometric output ports.

Conventions baked in here and relied on everywhere else:

* slot 0 is the first emission bin, slot 1 the second; each delay line
  adds exactly one slot.
* in the transformer the horizontal component keeps its slot and the
  vertical component takes the fiber delay, so the second bin's H overlaps
  the first bin's delayed V at slot 1 (the central slot).
* an untracked polarization (``pol=None``) entering a polarizer behaves
  like H: the pair source emits co-polarized photons and its axis defines H.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvariantViolationError
from .modes import FREE, LinearMap, ModeLabel

SPEED_OF_LIGHT = 2.998e8  # m/s

# Detector port identifiers.
CH_A_Z0 = "A.Z0"
CH_A_Z1 = "A.Z1"
CH_A_XP = "A.X+"
CH_A_XM = "A.X-"
CH_B_Z = "B.Zdir"
CH_B_XP = "B.X+"
CH_B_XM = "B.X-"

ALICE_CHANNELS = {"Z": (CH_A_Z0, CH_A_Z1), "X": (CH_A_XP, CH_A_XM)}
BOB_CHANNELS = (CH_B_Z, CH_B_XP, CH_B_XM)
ALL_CHANNELS = (CH_A_Z0, CH_A_Z1, CH_A_XP, CH_A_XM, CH_B_Z, CH_B_XP, CH_B_XM)


@dataclass(frozen=True)
class TransformerConfig:
    """Parameters of the time-bin to polarization format transformer."""

    polarizer_angle_deg: float = 45.0
    excess_loss_db: float = 1.5
    pm_fiber_transmission: float = 1.0
    glan_extinction_ratio: float = math.inf
    delay_slots: int = 1

    def __post_init__(self):
        if self.excess_loss_db < 0:
            raise InvariantViolationError(
                "transformer.excess_loss_db", "must be >= 0"
            )
        if not self.glan_extinction_ratio > 1:
            raise InvariantViolationError(
                "transformer.glan_extinction_ratio", "must be > 1"
            )
        if not 0 < self.pm_fiber_transmission <= 1:
            raise InvariantViolationError(
                "transformer.pm_fiber_transmission", "must be in (0, 1]"
            )
        if self.delay_slots < 1:
            raise InvariantViolationError("transformer.delay_slots", "must be >= 1")


@dataclass(frozen=True)
class DecoderConfig:
    """Parameters of the planar-lightwave-circuit time-bin decoder."""

    phase_phi: float = 0.0
    z_branch_ratio: float = 0.5
    delay_slots: int = 1
    insertion_loss_db: float = 0.0

    def __post_init__(self):
        if not 0 <= self.z_branch_ratio <= 1:
            raise InvariantViolationError(
                "decoder.z_branch_ratio", "must be in [0, 1]"
            )
        if self.delay_slots != 1:
            raise InvariantViolationError(
                "decoder.delay_slots", "must be 1 for this geometry"
            )
        if self.insertion_loss_db < 0:
            raise InvariantViolationError(
                "decoder.insertion_loss_db", "must be >= 0"
            )


def _prune(outs):
    return tuple((label, coeff) for label, coeff in outs if abs(coeff) >= 1e-15)


def polarizer_map(angle_deg: float, party: str = "A") -> LinearMap:
    """Linear polarizer at ``angle_deg`` from horizontal.

    Projects the input onto the transmission axis and re-expresses the
    transmitted photon in the H/V basis, so it is lossy in general.  An
    untracked input polarization is treated as H.
    """
    a = math.radians(angle_deg)
    ca, sa = math.cos(a), math.sin(a)
    transmitted = {None: ca, "H": ca, "V": sa}
    rules = {}
    for slot in (0, 1, 2):
        for pol, t in transmitted.items():
            inp = ModeLabel(party, slot, pol, FREE)
            rules[inp] = _prune(
                (
                    (ModeLabel(party, slot, "H", FREE), t * ca),
                    (ModeLabel(party, slot, "V", FREE), t * sa),
                )
            )
    return LinearMap(party, rules)


def hwp_map(angle_deg: float, party: str = "A") -> LinearMap:
    """Half wave plate with fast axis at ``angle_deg``: lossless Jones rotation."""
    c2, s2 = math.cos(2 * math.radians(angle_deg)), math.sin(2 * math.radians(angle_deg))
    rules = {}
    for slot in (0, 1, 2):
        h_in = ModeLabel(party, slot, "H", FREE)
        v_in = ModeLabel(party, slot, "V", FREE)
        h_out = ModeLabel(party, slot, "H", FREE)
        v_out = ModeLabel(party, slot, "V", FREE)
        rules[h_in] = _prune(((h_out, c2), (v_out, s2)))
        rules[v_in] = _prune(((h_out, s2), (v_out, -c2)))
    return LinearMap(party, rules)


def format_transformer_map(cfg: TransformerConfig) -> LinearMap:
    """Alice's full format transformer as one map.

    Composition of the input polarizer with the polarization-splitting
    delay loop: the H component exits directly at its slot, the V component
    returns through the fiber one delay later, attenuated by the fiber
    transmission.  Finite extinction leaks an amplitude fraction
    1/sqrt(extinction) of each component into the other path; the leaked
    light keeps its polarization, which is what puts counts into the wrong
    timing windows downstream.  The aggregate excess loss scales every
    coefficient.
    """
    a = math.radians(cfg.polarizer_angle_deg)
    ca, sa = math.cos(a), math.sin(a)
    transmitted = {None: ca, "H": ca, "V": sa}
    g = 10.0 ** (-cfg.excess_loss_db / 20.0)
    eps = (
        0.0
        if math.isinf(cfg.glan_extinction_ratio)
        else cfg.glan_extinction_ratio ** -0.5
    )
    norm = 1.0 / math.sqrt(1.0 + eps**2)
    t_pm = cfg.pm_fiber_transmission
    d = cfg.delay_slots
    rules = {}
    for slot in (0, 1):
        for pol, t in transmitted.items():
            h_amp = t * ca * norm * g
            v_amp = t * sa * norm * g
            inp = ModeLabel("A", slot, pol, FREE)
            rules[inp] = _prune(
                (
                    (ModeLabel("A", slot, "H", FREE), h_amp),
                    (ModeLabel("A", slot + d, "H", FREE), h_amp * eps * t_pm),
                    (ModeLabel("A", slot + d, "V", FREE), v_amp * t_pm),
                    (ModeLabel("A", slot, "V", FREE), v_amp * eps),
                )
            )
    return LinearMap("A", rules)


def plc_decoder_map(cfg: DecoderConfig) -> LinearMap:
    """Bob's 1-to-3 decoder: direct timing branch plus interferometer ports.

    An input at slot s splits with amplitude sqrt(1-r) to the direct branch
    (arrival time carries the bit) and sqrt(r) into the delay interferometer,
    whose two ports receive (slot s)/2 and +/- e^{i phi} (slot s+1)/2.  Rows
    are exactly lossless at zero insertion loss.
    """
    r = cfg.z_branch_ratio
    amp_z = math.sqrt(1.0 - r)
    amp_x = math.sqrt(r) / 2.0
    phase = complex(math.cos(cfg.phase_phi), math.sin(cfg.phase_phi))
    d = 10.0 ** (-cfg.insertion_loss_db / 20.0)
    rules = {}
    for slot in (0, 1):
        inp = ModeLabel("B", slot, None, FREE)
        rules[inp] = _prune(
            (
                (ModeLabel("B", slot, None, CH_B_Z), amp_z * d),
                (ModeLabel("B", slot, None, CH_B_XP), amp_x * d),
                (ModeLabel("B", slot + cfg.delay_slots, None, CH_B_XP), amp_x * phase * d),
                (ModeLabel("B", slot, None, CH_B_XM), amp_x * d),
                (ModeLabel("B", slot + cfg.delay_slots, None, CH_B_XM), -amp_x * phase * d),
            )
        )
    return LinearMap("B", rules)


def pbs_analyzer_map(basis: str) -> LinearMap:
    """Alice's polarization analyzer.

    Basis Z routes H to port A.Z0 and V to port A.Z1.  Basis X is a half
    wave plate at 22.5 degrees followed by the same splitter, so the +45
    and -45 states exit cleanly at A.X+ and A.X-.
    """
    if basis not in ("Z", "X"):
        raise ValueError(f"basis must be 'Z' or 'X', got {basis!r}")
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    rules = {}
    for slot in (0, 1, 2):
        h_in = ModeLabel("A", slot, "H", FREE)
        v_in = ModeLabel("A", slot, "V", FREE)
        if basis == "Z":
            rules[h_in] = ((ModeLabel("A", slot, "H", CH_A_Z0), 1.0),)
            rules[v_in] = ((ModeLabel("A", slot, "V", CH_A_Z1), 1.0),)
        else:
            xp = ModeLabel("A", slot, "H", CH_A_XP)
            xm = ModeLabel("A", slot, "V", CH_A_XM)
            rules[h_in] = ((xp, inv_sqrt2), (xm, inv_sqrt2))
            rules[v_in] = ((xp, inv_sqrt2), (xm, -inv_sqrt2))
    return LinearMap("A", rules)


def guide_delay_seconds(length_m: float, group_index: float = 1.50) -> float:
    """Propagation delay of a guided path; 0.50 m at n=1.50 gives ~2.5 ns."""
    return length_m * group_index / SPEED_OF_LIGHT
