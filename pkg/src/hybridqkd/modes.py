"""Exact amplitude bookkeeping for sub-normalized two-photon states.

A two-photon state is a table of complex amplitudes over pairs of discrete
mode labels, one label per party.  A label is (party, time slot, polarization,
detector channel).  Optical components are linear maps acting on one party's
labels; applying a map distributes each amplitude over output labels and sums
coherently whenever two paths land on the identical label pair.  All values
are immutable after construction and every operation is a pure function.
"""

from __future__ import annotations

import cmath
from dataclasses import dataclass, field

from .errors import (
    DuplicateLabelError,
    EmptyStateError,
    MapNotSubnormalizedError,
    MapPartyMismatchError,
    NotSubnormalizedError,
    UnresolvedChannelError,
)

PARTIES = ("A", "B")
POLS = ("H", "V", None)
SLOTS = (0, 1, 2)

#: Channel value for a photon that has not yet reached analysis optics.
FREE = "free"

#: Tolerance on norm / sub-unitarity checks.
NORM_TOL = 1e-12

#: Amplitudes below this magnitude are dropped after applying a map.
PRUNE_TOL = 1e-15


@dataclass(frozen=True, order=True)
class ModeLabel:
    """One photon's discrete mode: party, arrival slot, polarization, channel.

    Slots count arrival time in units of the interferometer delay, offset
    from the first emission bin.  ``pol=None`` marks a photon whose
    polarization is not tracked (Bob's photon, or Alice's before the format
    transformer).  ``channel`` stays ``"free"`` until analysis optics assign
    a detector port.
    """

    party: str
    slot: int
    pol: str | None = None
    channel: str = FREE

    def __post_init__(self):
        if self.party not in PARTIES:
            raise ValueError(f"unknown party {self.party!r}")
        if self.slot not in SLOTS:
            raise ValueError(f"slot {self.slot} outside reachable range {SLOTS}")
        if self.pol not in POLS:
            raise ValueError(f"unknown polarization {self.pol!r}")

    def shifted(self, dslot: int) -> "ModeLabel":
        return ModeLabel(self.party, self.slot + dslot, self.pol, self.channel)


@dataclass(frozen=True)
class JointState:
    """Sub-normalized amplitude table over (label_A, label_B) pairs."""

    amplitudes: dict[tuple[ModeLabel, ModeLabel], complex]

    @property
    def norm_sq(self) -> float:
        return sum(abs(a) ** 2 for a in self.amplitudes.values())

    def scaled(self, factor: complex) -> "JointState":
        return JointState({k: v * factor for k, v in self.amplitudes.items()})


@dataclass(frozen=True)
class LinearMap:
    """Per-input-label linear transformation for one party's photon.

    ``rules`` maps a concrete input label to the list of (output label,
    complex coefficient) it scatters into.  An input label with no rule
    passes through unchanged.  An empty output list absorbs the photon.
    Every rule row must carry total output power at most 1; a row at
    exactly 1 is a lossless (unitary) row.
    """

    party: str
    rules: dict[ModeLabel, tuple[tuple[ModeLabel, complex], ...]]

    def __post_init__(self):
        if self.party not in PARTIES:
            raise MapPartyMismatchError(f"unknown party {self.party!r}")
        for pattern, outs in self.rules.items():
            if pattern.party != self.party:
                raise MapPartyMismatchError(
                    f"rule input {pattern} does not belong to party {self.party}"
                )
            power = 0.0
            for out, coeff in outs:
                if out.party != self.party:
                    raise MapPartyMismatchError(
                        f"rule output {out} does not belong to party {self.party}"
                    )
                power += abs(coeff) ** 2
            if power > 1.0 + NORM_TOL:
                raise MapNotSubnormalizedError(
                    f"rule for {pattern} has output power {power:.6g} > 1"
                )

    def row_power(self, pattern: ModeLabel) -> float:
        return sum(abs(c) ** 2 for _, c in self.rules.get(pattern, ((pattern, 1.0),)))

    def is_lossless(self) -> bool:
        return all(
            abs(self.row_power(p) - 1.0) <= NORM_TOL for p in self.rules
        )


@dataclass(frozen=True)
class ProbTable:
    """Joint detection probabilities plus the mass lost to absorption.

    Entries are keyed by (channel_A, slot_A, channel_B, slot_B).  Entries and
    ``loss_prob`` sum to 1 for a state built from a normalized input.
    """

    entries: dict[tuple[str, int, str, int], float]
    loss_prob: float

    def __post_init__(self):
        for key, p in self.entries.items():
            if not (-1e-12 <= p <= 1.0 + 1e-9):
                raise ValueError(f"probability out of range for {key}: {p}")
        if abs(self.total() - 1.0) > 1e-9:
            raise ValueError(f"entries + loss_prob = {self.total():.12g}, expected 1")

    def total(self) -> float:
        return sum(self.entries.values()) + self.loss_prob


def build_state(entries) -> JointState:
    """Assemble a joint state from (label pair, amplitude) items.

    ``entries`` may be a dict or an iterable of ((label_A, label_B), amp)
    pairs.  Rejects empty input, duplicated label pairs, labels that put
    both photons on the same party, and any table whose norm-squared
    exceeds 1.
    """
    if hasattr(entries, "items"):
        items = list(entries.items())
    else:
        items = list(entries)
    if not items:
        raise EmptyStateError("state needs at least one amplitude")
    table: dict[tuple[ModeLabel, ModeLabel], complex] = {}
    for (la, lb), amp in items:
        if la.party == lb.party:
            raise ValueError(f"both labels on party {la.party}: {la}, {lb}")
        if la.party != "A":
            la, lb = lb, la
        key = (la, lb)
        if key in table:
            raise DuplicateLabelError(f"label pair repeated: {key}")
        table[key] = complex(amp)
    norm_sq = sum(abs(a) ** 2 for a in table.values())
    if norm_sq > 1.0 + NORM_TOL:
        raise NotSubnormalizedError(f"norm^2 = {norm_sq:.12g} exceeds 1")
    return JointState(table)


def apply_local_map(state: JointState, lmap: LinearMap) -> JointState:
    """Propagate a state through one optical component.

    Amplitudes scattering onto the same output label pair are summed
    coherently; results below the pruning tolerance are dropped.
    """
    if lmap.party not in PARTIES:
        raise MapPartyMismatchError(f"unknown party {lmap.party!r}")
    out: dict[tuple[ModeLabel, ModeLabel], complex] = {}
    for (la, lb), amp in state.amplitudes.items():
        local = la if lmap.party == "A" else lb
        outs = lmap.rules.get(local, ((local, 1.0),))
        for new_local, coeff in outs:
            key = (new_local, lb) if lmap.party == "A" else (la, new_local)
            out[key] = out.get(key, 0.0) + amp * coeff
    pruned = {k: v for k, v in out.items() if abs(v) >= PRUNE_TOL}
    return JointState(pruned)


def outcome_probabilities(state: JointState) -> ProbTable:
    """Born-rule probabilities over detectable (channel, slot) outcomes.

    Requires every label to carry a concrete channel.  Amplitudes sharing
    the identical detectable key have already been summed coherently by
    ``apply_local_map``; here distinct polarization labels on the same
    channel/slot still add coherently since a detector cannot resolve them.
    """
    amp_by_key: dict[tuple[str, int, str, int], complex] = {}
    pol_groups: dict[tuple[str, int, str, int], dict] = {}
    for (la, lb), amp in state.amplitudes.items():
        if la.channel == FREE or lb.channel == FREE:
            raise UnresolvedChannelError(f"label without channel: {(la, lb)}")
        key = (la.channel, la.slot, lb.channel, lb.slot)
        # photons differing only in an untracked degree of freedom (pol) at
        # the same port are distinguishable in principle -> add incoherently
        pols = (la.pol, lb.pol)
        group = pol_groups.setdefault(key, {})
        group[pols] = group.get(pols, 0.0) + amp
    entries: dict[tuple[str, int, str, int], float] = {}
    for key, group in pol_groups.items():
        p = sum(abs(a) ** 2 for a in group.values())
        if p > 0.0:
            entries[key] = p
    loss = 1.0 - sum(entries.values())
    return ProbTable(entries, loss_prob=max(loss, 0.0))


def compose_maps(second: LinearMap, first: LinearMap) -> LinearMap:
    """The single map equivalent to applying ``first`` then ``second``."""
    if second.party != first.party:
        raise MapPartyMismatchError(
            f"cannot compose maps on parties {first.party} and {second.party}"
        )
    keys = set(first.rules) | set(second.rules)
    rules: dict[ModeLabel, tuple[tuple[ModeLabel, complex], ...]] = {}
    for key in keys:
        acc: dict[ModeLabel, complex] = {}
        for mid, c1 in first.rules.get(key, ((key, 1.0),)):
            for out, c2 in second.rules.get(mid, ((mid, 1.0),)):
                acc[out] = acc.get(out, 0.0) + c1 * c2
        rules[key] = tuple(
            (out, c) for out, c in acc.items() if abs(c) >= PRUNE_TOL
        )
    return LinearMap(first.party, rules)


def identity_map(party: str) -> LinearMap:
    return LinearMap(party, {})


def phase_shifted(state: JointState, alpha: float) -> JointState:
    """Multiply every amplitude by exp(i*alpha)."""
    return state.scaled(cmath.exp(1j * alpha))


def format_state(state: JointState) -> str:
    """Debug rendering: one row per amplitude with Re, Im and power."""
    header = f"{'label A':22s} {'label B':22s} {'Re':>12s} {'Im':>12s} {'|amp|^2':>12s}"
    lines = [header, "-" * len(header)]

    def fmt(label: ModeLabel) -> str:
        pol = label.pol if label.pol is not None else "-"
        return f"{label.party}:s{label.slot}:{pol}:{label.channel}"

    for (la, lb), amp in sorted(state.amplitudes.items()):
        lines.append(
            f"{fmt(la):22s} {fmt(lb):22s} {amp.real:12.6f} {amp.imag:12.6f}"
            f" {abs(amp) ** 2:12.6f}"
        )
    lines.append(f"norm^2 = {state.norm_sq:.9f}")
    return "\n".join(lines)
