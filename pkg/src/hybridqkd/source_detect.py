"""Stochastic layer: pair emission, detection imperfections, coincidences.

Pairs are emitted as a homogeneous Poisson process; each pair carries one
realization of the pump phase difference between its two emission bins.
Detection applies per-channel efficiency, timing jitter, dark counts
(confined to open gates for gated detectors), and dead time.  Coincidences
pair Alice and Bob clicks greedily in time order, each click used at most
once, and accumulate a fine-grained arrival-time-difference histogram per
channel pair.

Everything is driven by an explicit RNG and is bit-reproducible for a
fixed seed.  The module works internally on numpy arrays; thin event-level
wrappers are provided for small-scale use.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantViolationError, UnsortedInputError
from .modes import ProbTable

#: Sentinel outcome for a pair absorbed before any detector.
LOST = "lost"

ORIGIN_PHOTON = 0
ORIGIN_DARK = 1
ORIGIN_NAMES = ("photon", "dark")

#: Slot value for clicks with no associated emission bin (dark counts).
NO_SLOT = -1


@dataclass(frozen=True)
class SourceConfig:
    """Pair source parameters; the pump power is recorded metadata only."""

    pair_rate_mu: float = 9.0e4
    phase_mean: float = 0.0
    phase_sigma: float = 0.0
    bin_separation_tau: float = 2.5e-9
    pump_power_uw: float = 160.0

    def __post_init__(self):
        if self.pair_rate_mu < 0:
            raise InvariantViolationError("source.pair_rate_mu", "must be >= 0")
        if self.phase_sigma < 0:
            raise InvariantViolationError("source.phase_sigma", "must be >= 0")
        if self.bin_separation_tau <= 0:
            raise InvariantViolationError("source.bin_separation_tau", "must be > 0")


@dataclass(frozen=True)
class DetectorConfig:
    """Single-photon detector model."""

    efficiency: float = 0.55
    dark_rate: float = 0.0
    jitter_sigma: float = 0.0
    dead_time: float = 0.0
    gated: bool = False
    gate_width: float = 40e-9

    def __post_init__(self):
        if not 0 <= self.efficiency <= 1:
            raise InvariantViolationError("detector.efficiency", "must be in [0, 1]")
        for name in ("dark_rate", "jitter_sigma", "dead_time", "gate_width"):
            if getattr(self, name) < 0:
                raise InvariantViolationError(f"detector.{name}", "must be >= 0")


@dataclass(frozen=True)
class CoincidenceConfig:
    """Coincidence identification parameters.

    ``channel_offsets`` holds per-channel electronic delays added to click
    times before pairing; ``generator_delay`` positions Bob's gates relative
    to Alice's trigger; ``scan_delay`` shifts the pairing condition and is
    the quantity scanned in a delay curve.  ``hist_bin`` sets the width of
    the arrival-time-difference histogram bins.
    """

    window: float = 40e-9
    channel_offsets: dict = field(default_factory=dict)
    generator_delay: float = 0.0
    scan_delay: float = 0.0
    hist_bin: float = 0.25e-9

    def __post_init__(self):
        if self.window <= 0:
            raise InvariantViolationError("coincidence.window", "must be > 0")
        if self.hist_bin <= 0:
            raise InvariantViolationError("coincidence.hist_bin", "must be > 0")


@dataclass(frozen=True)
class EmissionEvent:
    time: float
    delta_theta: float


@dataclass(frozen=True)
class ClickEvent:
    channel: str
    time: float
    origin: str = "photon"
    slot: int = NO_SLOT

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("click time must be >= 0")


@dataclass
class ClickStream:
    """Time-sorted click record as parallel arrays."""

    times: np.ndarray
    channels: np.ndarray  # indices into names
    names: tuple[str, ...]
    slots: np.ndarray
    origins: np.ndarray

    def __len__(self) -> int:
        return len(self.times)

    @classmethod
    def empty(cls, names=()):
        return cls(
            np.empty(0), np.empty(0, np.int16), tuple(names),
            np.empty(0, np.int16), np.empty(0, np.int8),
        )

    @classmethod
    def from_events(cls, events) -> "ClickStream":
        events = list(events)
        names: list[str] = []
        index: dict[str, int] = {}
        times = np.empty(len(events))
        chans = np.empty(len(events), np.int16)
        slots = np.full(len(events), NO_SLOT, np.int16)
        origins = np.zeros(len(events), np.int8)
        for i, ev in enumerate(events):
            if isinstance(ev, ClickEvent):
                ch, t, origin, slot = ev.channel, ev.time, ev.origin, ev.slot
            else:
                ch, t = ev[0], ev[1]
                origin, slot = "photon", NO_SLOT
            if ch not in index:
                index[ch] = len(names)
                names.append(ch)
            times[i] = t
            chans[i] = index[ch]
            slots[i] = slot
            origins[i] = ORIGIN_NAMES.index(origin)
        return cls(times, chans, tuple(names), slots, origins)

    def to_events(self) -> list[ClickEvent]:
        return [
            ClickEvent(
                self.names[c], float(t), ORIGIN_NAMES[o], int(s)
            )
            for t, c, s, o in zip(self.times, self.channels, self.slots, self.origins)
        ]

    def sorted_by_time(self) -> "ClickStream":
        order = np.argsort(self.times, kind="stable")
        return ClickStream(
            self.times[order], self.channels[order], self.names,
            self.slots[order], self.origins[order],
        )


def generate_pairs(cfg: SourceConfig, duration: float, rng, t_start: float = 0.0):
    """Poisson pair emissions, each with one sampled pump-phase difference."""
    if duration <= 0:
        raise ValueError("duration must be > 0")
    rng = _as_rng(rng)
    times, phases = _pair_arrays(cfg, duration, rng, t_start)
    return [EmissionEvent(float(t), float(p)) for t, p in zip(times, phases)]


def _pair_arrays(cfg: SourceConfig, duration, rng, t_start=0.0, cap_rate=None):
    rate = cfg.pair_rate_mu if cap_rate is None else cap_rate
    n = rng.poisson(rate * duration)
    times = np.sort(rng.uniform(t_start, t_start + duration, n))
    phases = cfg.phase_mean + cfg.phase_sigma * rng.standard_normal(n)
    return times, phases


class OutcomeSampler:
    """Precompiled cumulative table for drawing joint outcomes."""

    def __init__(self, table: ProbTable):
        keys = sorted(table.entries)
        probs = np.array([table.entries[k] for k in keys])
        self.outcomes = keys
        self.cdf = np.cumsum(probs)
        self.norm = float(self.cdf[-1]) if len(keys) else 0.0

    def sample_indices(self, u: np.ndarray) -> np.ndarray:
        """Outcome index per uniform draw; len(outcomes) means lost."""
        return np.searchsorted(self.cdf, u, side="right")


def sample_joint_outcome(table: ProbTable, rng):
    """Draw one joint outcome (channel_A, slot_A, channel_B, slot_B) or LOST."""
    rng = _as_rng(rng)
    sampler = OutcomeSampler(table)
    idx = int(sampler.sample_indices(rng.random(1))[0])
    if idx >= len(sampler.outcomes):
        return LOST
    return sampler.outcomes[idx]


def merge_gate_intervals(trigger_times: np.ndarray, delay: float, width: float):
    """Gate intervals centered ``delay`` after each trigger, overlaps merged."""
    if len(trigger_times) == 0:
        return np.empty(0), np.empty(0)
    starts = np.sort(trigger_times + (delay - width / 2.0))
    ends = starts + width
    new_group = np.concatenate([[True], starts[1:] > ends[:-1]])
    group_first = np.flatnonzero(new_group)
    merged_starts = starts[group_first]
    merged_ends = np.maximum.reduceat(ends, group_first)
    return merged_starts, merged_ends


def in_gates(times: np.ndarray, gate_starts: np.ndarray, gate_ends: np.ndarray):
    """Boolean mask of times falling inside any gate interval."""
    if len(gate_starts) == 0:
        return np.zeros(len(times), bool)
    idx = np.searchsorted(gate_starts, times, side="right") - 1
    ok = idx >= 0
    safe = np.where(ok, idx, 0)
    return ok & (times <= gate_ends[safe])


def _deadtime_filter(times: np.ndarray, dead_time: float) -> np.ndarray:
    """Keep-mask removing clicks within dead_time of the last kept click."""
    keep = np.ones(len(times), bool)
    if dead_time <= 0 or len(times) == 0:
        return keep
    last = -math.inf
    for i, t in enumerate(times):
        if t - last < dead_time:
            keep[i] = False
        else:
            last = t
    return keep


def _detect_channel(
    arrival_times,
    arrival_slots,
    cfg: DetectorConfig,
    u_eff,
    z_jitter,
    dark_times,
    gates=None,
):
    """Core detection chain for one channel with randomness supplied.

    Order: gate filtering of photon arrivals, efficiency thinning, timing
    jitter, dark-count injection (gated darks already restricted), dead-time
    removal, time sort.  Returns (times, slots, origins).
    """
    keep = np.ones(len(arrival_times), bool)
    if cfg.gated and gates is not None:
        keep &= in_gates(arrival_times, gates[0], gates[1])
    keep &= u_eff < cfg.efficiency
    times = arrival_times[keep]
    slots = arrival_slots[keep]
    if cfg.jitter_sigma > 0:
        times = times + cfg.jitter_sigma * z_jitter[keep]
    if cfg.gated and gates is not None and len(dark_times):
        dark_times = dark_times[in_gates(dark_times, gates[0], gates[1])]
    all_times = np.concatenate([times, dark_times])
    all_slots = np.concatenate(
        [slots, np.full(len(dark_times), NO_SLOT, slots.dtype)]
    )
    all_orig = np.concatenate(
        [
            np.zeros(len(times), np.int8),
            np.full(len(dark_times), ORIGIN_DARK, np.int8),
        ]
    )
    order = np.argsort(all_times, kind="stable")
    all_times, all_slots, all_orig = (
        all_times[order], all_slots[order], all_orig[order],
    )
    alive = _deadtime_filter(all_times, cfg.dead_time)
    return all_times[alive], all_slots[alive], all_orig[alive]


def detect(arrivals, configs, gates=None, rng=None, span=None) -> list[ClickEvent]:
    """Detection chain over a time-sorted arrival list.

    ``arrivals`` is a sequence of (channel, time) pairs or ClickEvents;
    ``configs`` is one DetectorConfig for all channels or a mapping per
    channel.  ``gates`` (start array, end array) applies to gated channels.
    ``span`` = (t0, t1) bounds dark-count generation; it defaults to the
    arrival extent and must be given when darks are wanted without arrivals.
    """
    rng = _as_rng(rng)
    stream = ClickStream.from_events(arrivals)
    if np.any(np.diff(stream.times) < 0):
        raise UnsortedInputError("arrivals must be time-sorted")
    if span is None:
        if len(stream.times):
            span = (float(stream.times.min()), float(stream.times.max()))
        else:
            span = (0.0, 0.0)
    names = list(stream.names)
    if isinstance(configs, DetectorConfig):
        configs = {ch: configs for ch in names}
    else:
        for ch in configs:
            if ch not in names:
                names.append(ch)
    out: list[ClickEvent] = []
    for ch in sorted(names):
        cfg = configs.get(ch) if not isinstance(configs, DetectorConfig) else configs
        if cfg is None:
            raise KeyError(f"no detector config for channel {ch!r}")
        if ch in stream.names:
            mask = stream.channels == stream.names.index(ch)
            times = stream.times[mask]
            slots = stream.slots[mask]
        else:
            times = np.empty(0)
            slots = np.empty(0, np.int16)
        u_eff = rng.random(len(times))
        z_jit = rng.standard_normal(len(times)) if cfg.jitter_sigma > 0 else np.zeros(len(times))
        dark_times = _dark_stream(cfg.dark_rate, span, rng)
        t, s, o = _detect_channel(times, slots, cfg, u_eff, z_jit, dark_times, gates)
        out.extend(
            ClickEvent(ch, float(tt), ORIGIN_NAMES[oo], int(ss))
            for tt, ss, oo in zip(t, s, o)
        )
    out.sort(key=lambda ev: ev.time)
    return out


def _dark_stream(dark_rate: float, span, rng) -> np.ndarray:
    if dark_rate <= 0 or span[1] <= span[0]:
        return np.empty(0)
    n = rng.poisson(dark_rate * (span[1] - span[0]))
    return np.sort(rng.uniform(span[0], span[1], n))


@dataclass
class CoincidenceResult:
    """Greedy pairing output: per-channel-pair counts plus dt histograms."""

    counts: dict
    hist: dict
    bin_edges: np.ndarray
    n_pairs: int
    dt: np.ndarray
    pair_keys: list
    pair_idx: np.ndarray
    slot_a: np.ndarray
    slot_b: np.ndarray

    def total(self) -> int:
        return self.n_pairs

    def central_slot_counts(self, central: int = 1) -> dict:
        """Counts per channel pair restricted to both clicks in ``central``."""
        out: dict = {}
        mask = (self.slot_a == central) & (self.slot_b == central)
        for k, key in enumerate(self.pair_keys):
            out[key] = int(np.count_nonzero(mask & (self.pair_idx == k)))
        return out


def _pair_greedy_reference(adj_a, adj_b, half_window):
    """Two-pointer greedy earliest-first pairing (reference implementation)."""
    pairs = []
    i = j = 0
    na, nb = len(adj_a), len(adj_b)
    while i < na and j < nb:
        d = adj_b[j] - adj_a[i]
        if d < -half_window:
            j += 1
        elif d > half_window:
            i += 1
        else:
            pairs.append((i, j))
            i += 1
            j += 1
    return pairs


def _pair_greedy(adj_a, adj_b, half_window):
    """Vectorized greedy pairing, equivalent to the two-pointer scan.

    Each Bob click (processed in time order) takes the earliest unused
    Alice click within the window.  Conflicts are rare for sparse Bob
    streams and resolved by advancing the losing candidates.
    """
    na, nb = len(adj_a), len(adj_b)
    if na == 0 or nb == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    cand = np.searchsorted(adj_a, adj_b - half_window, side="left")
    ia_out = np.full(nb, -1, np.int64)
    pending = np.arange(nb)
    while len(pending):
        c = cand[pending]
        valid = c < na
        c_safe = np.where(valid, c, na - 1)
        valid &= np.abs(adj_a[c_safe] - adj_b[pending]) <= half_window
        pending = pending[valid]
        if not len(pending):
            break
        c = cand[pending]
        # first bob wins each contested alice click
        uniq, first_pos = np.unique(c, return_index=True)
        winners = pending[first_pos]
        ia_out[winners] = c[first_pos]
        loser_mask = np.ones(len(pending), bool)
        loser_mask[first_pos] = False
        losers = pending[loser_mask]
        cand[losers] = cand[losers] + 1
        pending = losers
        # losers must also not reuse alice clicks taken in earlier rounds;
        # monotone candidates guarantee they only move forward
        if len(pending):
            taken = np.sort(ia_out[ia_out >= 0])
            adv = np.searchsorted(taken, cand[pending], side="left")
            inside = adv < len(taken)
            adv_safe = np.where(inside, adv, len(taken) - 1)
            bump = inside & (taken[adv_safe] == cand[pending])
            while np.any(bump):
                cand[pending[bump]] += 1
                adv = np.searchsorted(taken, cand[pending], side="left")
                inside = adv < len(taken)
                adv_safe = np.where(inside, adv, len(taken) - 1)
                bump = inside & (taken[adv_safe] == cand[pending])
    matched = ia_out >= 0
    return ia_out[matched], np.flatnonzero(matched)


def coincidences(
    alice, bob, cfg: CoincidenceConfig, scan_delay: float | None = None
) -> CoincidenceResult:
    """Pair Alice and Bob click streams and histogram their time differences.

    A coincidence is a click pair with
    ``|t_b + offset(b) - t_a - offset(a) - scan_delay| <= window / 2``;
    clicks are consumed greedily in time order, each at most once.
    """
    if scan_delay is None:
        scan_delay = cfg.scan_delay
    sa = alice if isinstance(alice, ClickStream) else ClickStream.from_events(alice)
    sb = bob if isinstance(bob, ClickStream) else ClickStream.from_events(bob)
    for s in (sa, sb):
        if np.any(np.diff(s.times) < 0):
            raise UnsortedInputError("click streams must be time-sorted")
    off_a = np.array([cfg.channel_offsets.get(ch, 0.0) for ch in sa.names])
    off_b = np.array([cfg.channel_offsets.get(ch, 0.0) for ch in sb.names])
    adj_a = sa.times + (off_a[sa.channels] if len(sa.names) else 0.0)
    adj_b = sb.times + (off_b[sb.channels] if len(sb.names) else 0.0) - scan_delay
    order_a = np.argsort(adj_a, kind="stable")
    order_b = np.argsort(adj_b, kind="stable")
    ia, ib = _pair_greedy(adj_a[order_a], adj_b[order_b], cfg.window / 2.0)
    ia = order_a[ia]
    ib = order_b[ib]
    dt = (sb.times[ib] + (off_b[sb.channels[ib]] if len(sb.names) else 0.0)
          - scan_delay
          - sa.times[ia]
          - (off_a[sa.channels[ia]] if len(sa.names) else 0.0))

    n_bins = max(1, int(math.ceil(cfg.window / cfg.hist_bin)))
    edges = -cfg.window / 2.0 + cfg.hist_bin * np.arange(n_bins + 1)

    pair_keys: list = []
    key_index: dict = {}
    pair_idx = np.empty(len(ia), np.int32)
    for n, (ca, cb) in enumerate(zip(sa.channels[ia], sb.channels[ib])):
        key = (sa.names[ca], sb.names[cb])
        if key not in key_index:
            key_index[key] = len(pair_keys)
            pair_keys.append(key)
        pair_idx[n] = key_index[key]

    counts = {key: int(np.count_nonzero(pair_idx == k))
              for k, key in enumerate(pair_keys)}
    hist = {}
    bin_of = np.clip(((dt + cfg.window / 2.0) / cfg.hist_bin).astype(np.int64),
                     0, n_bins - 1)
    for k, key in enumerate(pair_keys):
        h = np.zeros(n_bins, np.int64)
        np.add.at(h, bin_of[pair_idx == k], 1)
        hist[key] = h
    return CoincidenceResult(
        counts=counts,
        hist=hist,
        bin_edges=edges,
        n_pairs=len(ia),
        dt=dt,
        pair_keys=pair_keys,
        pair_idx=pair_idx,
        slot_a=sa.slots[ia].astype(np.int16),
        slot_b=sb.slots[ib].astype(np.int16),
    )


def clicks_to_csv(path, clicks, header_comments=()):
    """Write clicks as CSV with columns channel, time_s, origin."""
    events = clicks.to_events() if isinstance(clicks, ClickStream) else list(clicks)
    with open(path, "w", newline="") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["channel", "time_s", "origin"])
        for ev in events:
            writer.writerow([ev.channel, repr(ev.time), ev.origin])


def clicks_from_csv(path) -> list[ClickEvent]:
    out = []
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    for row in rows[1:]:
        out.append(ClickEvent(row[0], float(row[1]), row[2]))
    return out


def _as_rng(rng):
    if rng is None:
        raise ValueError("an explicit rng or seed is required")
    if isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    return rng
