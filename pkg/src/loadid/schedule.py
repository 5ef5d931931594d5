"""Balanced Gray codes and grouped, randomized appliance event schedules.

Appliance ON/OFF states are bits of an integer bitmask (bit ``i`` is
appliance ``i``).  A Gray code is stored as its *transition sequence*: the
bit flipped at each step of the cycle, starting from the all-zero word.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from typing import Iterable, NamedTuple

import numpy as np

from .errors import EmptyInputError, FormatError, ParameterError
from . import metrics


class Action(str, enum.Enum):
    ON = "on"
    OFF = "off"


class Event(NamedTuple):
    time_cycle: int
    appliance_id: int
    action: Action


@dataclass(frozen=True)
class GrayCodeSequence:
    n_bits: int
    codewords: tuple[int, ...]

    @property
    def transitions(self) -> list[int]:
        """Bit index flipped between each codeword and its cyclic successor."""
        words = self.codewords
        out = []
        for i, w in enumerate(words):
            diff = w ^ words[(i + 1) % len(words)]
            out.append(diff.bit_length() - 1)
        return out

    def transition_counts(self) -> np.ndarray:
        return np.bincount(self.transitions, minlength=self.n_bits)


# --------------------------------------------------------------------------
# Gray code construction

@lru_cache(maxsize=None)
def _balanced_transitions(n: int) -> tuple[int, ...]:
    """Transition sequence of an n-bit balanced cyclic Gray code (n even).

    Recursive product construction: the (n-2)-bit cycle is walked across the
    four states of the two new bits.  The base cycle is cut into k segments;
    each segment is swept three times (serpentine over new-bit levels 0..2),
    and a final pass along level 3 closes the cycle.  Edges inside a segment
    are used four times, the k-1 cut edges twice, the closing edge never, and
    each new bit flips k+1 times.  Choosing how many cuts fall on each old
    coordinate sets every count to within 2 of 2**n / n.
    """
    if n == 2:
        return (0, 1, 0, 1)
    base = _balanced_transitions(n - 2)
    N = len(base)
    m = n - 2
    a, b = m, m + 1
    counts = np.bincount(base, minlength=m)
    wrap = np.zeros(m, dtype=int)
    wrap[base[-1]] = 1
    avail = counts - wrap
    # targets are measured in pairs of flips; every count is even
    lo, extra = divmod(2 ** (n - 1), n)

    units = None
    for new_units in ((lo + 1, lo) if extra >= 2 else (lo,)):
        spare = extra - 2 * (new_units - lo)
        tu = np.full(m, lo)
        need = avail - tu
        if (need > 1).any() or (need == 1).sum() > spare:
            continue
        tu[need == 1] += 1
        spare -= int((need == 1).sum())
        room = [i for i in np.argsort(-(2 * avail - tu), kind="stable")
                if need[i] != 1 and tu[i] + 1 <= 2 * avail[i]]
        if len(room) < spare:
            continue
        for i in room[:spare]:
            tu[i] += 1
        units = (new_units, tu)
        break
    if units is None:  # pragma: no cover - never hit for n <= 16
        raise ParameterError(f"no balanced split found for n_bits={n}")
    new_units, tu = units
    k = 2 * new_units - 1
    cuts_per_bit = 2 * avail - tu

    cuts = set()
    for bit in range(m):
        x = int(cuts_per_bit[bit])
        if x == 0:
            continue
        edges = [j for j in range(N - 1) if base[j] == bit]
        picks = np.linspace(0, len(edges) - 1, x).round().astype(int) if x > 1 else [len(edges) // 2]
        cuts.update(edges[p] for p in picks)

    segments = []
    start = 0
    for j in range(N - 1):
        if j in cuts:
            segments.append((start, j))
            start = j + 1
    segments.append((start, N - 1))
    assert len(segments) == k

    out: list[int] = []
    upward = True
    for si, (s, e) in enumerate(segments):
        fwd = list(base[s:e])
        first, second = (a, b) if upward else (b, a)
        out += fwd + [first] + fwd[::-1] + [second] + fwd
        if si < k - 1:
            out.append(base[e])
        upward = not upward
    out.append(a)
    out += [base[j] for j in range(N - 2, -1, -1)]
    out.append(b)
    return tuple(out)


def _reflected_transitions(n: int) -> list[int]:
    # standard binary-reflected code; bit 0 flips every other step
    if n == 0:
        return []
    return [(i & -i).bit_length() - 1 if i % (1 << n) else n - 1
            for i in range(1, (1 << n) + 1)]


def _codewords(transitions: Iterable[int]) -> tuple[int, ...]:
    word = 0
    words = [0]
    for t in transitions:
        word ^= 1 << t
        words.append(word)
    return tuple(words[:-1])


def balanced_gray_code(n_bits: int) -> GrayCodeSequence:
    if not isinstance(n_bits, (int, np.integer)) or n_bits % 2 or not 2 <= n_bits <= 16:
        raise ParameterError(f"n_bits must be an even integer in [2, 16], got {n_bits!r}")
    return GrayCodeSequence(int(n_bits), _codewords(_balanced_transitions(int(n_bits))))


def group_transitions(width: int) -> list[int]:
    """Cyclic traversal used for a group of ``width`` appliances.

    Even widths use the balanced code; odd widths fall back to the reflected
    code, whose per-bit flip counts are not balanced.
    """
    if width <= 0:
        raise ParameterError("group width must be positive")
    if width % 2 == 0 and width <= 16:
        return list(_balanced_transitions(width))
    if width == 1:
        return [0, 0]
    return _reflected_transitions(width)


# --------------------------------------------------------------------------
# Schedules

@dataclass
class ScheduleParams:
    n_appliances: int
    group_size: int = 6
    groups_active_per_round: int = 3
    rounds: int = 30
    dwell_cycles: int = 1000
    rng_seed: int = 0

    def validate(self) -> None:
        for name in ("n_appliances", "group_size", "groups_active_per_round", "rounds", "dwell_cycles"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ParameterError(f"{name} must be a positive integer, got {v!r}")
        if self.group_size % 2:
            raise ParameterError("group_size must be even")
        if self.group_size > self.n_appliances:
            raise ParameterError("group_size must not exceed n_appliances")
        if self.group_size > 16:
            raise ParameterError("group_size above 16 is not supported")
        n_groups = math.ceil(self.n_appliances / self.group_size)
        if self.groups_active_per_round > n_groups:
            raise ParameterError(
                f"groups_active_per_round={self.groups_active_per_round} exceeds {n_groups} groups")
        if self.n_appliances > 32:
            raise ParameterError("at most 32 appliances fit a state bitmask")


@dataclass
class EventSchedule:
    events: list[Event]
    n_appliances: int
    dwell_cycles: int = 1000
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.events)

    def validate(self) -> None:
        state = 0
        last_t = -1
        for ev in self.events:
            if ev.time_cycle <= last_t:
                raise ParameterError("event times must be strictly increasing")
            if not 0 <= ev.appliance_id < self.n_appliances:
                raise ParameterError(f"appliance id {ev.appliance_id} out of range")
            on = bool(state >> ev.appliance_id & 1)
            if (ev.action is Action.ON) == on:
                raise ParameterError(
                    f"appliance {ev.appliance_id} switched {ev.action.value} twice at cycle {ev.time_cycle}")
            state ^= 1 << ev.appliance_id
            last_t = ev.time_cycle

    def states(self) -> np.ndarray:
        """Bitmask after each event, preceded by the initial all-OFF state."""
        out = np.zeros(len(self.events) + 1, dtype=np.int64)
        state = 0
        for i, ev in enumerate(self.events):
            state ^= 1 << ev.appliance_id
            out[i + 1] = state
        return out

    @property
    def horizon(self) -> int:
        """Cycle count covering every event plus one dwell after the last."""
        if not self.events:
            return self.dwell_cycles
        return self.events[-1].time_cycle + self.dwell_cycles

    def on_cycles(self) -> np.ndarray:
        on = np.zeros(self.n_appliances, dtype=np.int64)
        since = {}
        for ev in self.events:
            if ev.action is Action.ON:
                since[ev.appliance_id] = ev.time_cycle
            else:
                on[ev.appliance_id] += ev.time_cycle - since.pop(ev.appliance_id)
        for a, t in since.items():
            on[a] += self.horizon - t
        return on

    def duration_hours(self, mains_hz: float = 50.0) -> float:
        return self.horizon / mains_hz / 3600.0


def generate_schedule(params: ScheduleParams) -> EventSchedule:
    """Grouped, randomized balanced-Gray-code event schedule.

    Each round re-partitions the appliances into groups of ``group_size``
    (plus one smaller remainder group), activates the least-used group slots,
    and runs one full cyclic code traversal per active group.  Appliances
    with the fewest accumulated switches are placed on the bit positions that
    flip most often, so per-appliance counts even out across rounds.
    Traversals start at a random rotation and direction and are interleaved
    round-robin in slot order.
    """
    params.validate()
    rng = np.random.default_rng(params.rng_seed)
    n = params.n_appliances
    gs = params.group_size
    sizes = [gs] * (n // gs) + ([n % gs] if n % gs else [])
    slot_uses = np.zeros(len(sizes), dtype=np.int64)
    switched = np.zeros(n, dtype=np.int64)

    appliance_steps: list[int] = []
    for _ in range(params.rounds):
        order = np.lexsort((rng.random(len(sizes)), slot_uses))
        active = sorted(int(s) for s in order[: params.groups_active_per_round])
        slot_uses[active] += 1

        # (slot, bit, flip count) for every active bit position
        traversals = {}
        positions = []
        for slot in active:
            seq = group_transitions(sizes[slot])
            rot = int(rng.integers(len(seq)))
            seq = seq[rot:] + seq[:rot]
            if rng.random() < 0.5:
                seq = seq[::-1]
            traversals[slot] = seq
            counts = np.bincount(seq, minlength=sizes[slot])
            positions += [(slot, bit, int(c)) for bit, c in enumerate(counts)]

        pos_order = np.lexsort((rng.random(len(positions)), -np.array([p[2] for p in positions])))
        app_order = np.lexsort((rng.random(n), switched))
        mapping = {}
        for app, pi in zip(app_order, pos_order):
            slot, bit, count = positions[pi]
            mapping[slot, bit] = int(app)
            switched[app] += count

        streams = [[mapping[slot, bit] for bit in traversals[slot]] for slot in active]
        longest = max(len(s) for s in streams)
        for i in range(longest):
            for s in streams:
                if i < len(s):
                    appliance_steps.append(s[i])

    events = []
    state = 0
    for i, app in enumerate(appliance_steps):
        action = Action.OFF if state >> app & 1 else Action.ON
        state ^= 1 << app
        events.append(Event((i + 1) * params.dwell_cycles, app, action))
    return EventSchedule(events, n, params.dwell_cycles, params.rng_seed, asdict(params))


@dataclass
class ScheduleStats:
    events_per_appliance: list[int]
    unique_states: int
    event_br: float
    state_br: float


def schedule_stats(schedule: EventSchedule) -> ScheduleStats:
    if not schedule.events:
        raise EmptyInputError("schedule has no events")
    per_app = np.bincount([e.appliance_id for e in schedule.events], minlength=schedule.n_appliances)
    ratios = metrics.balance_ratios(per_app, schedule.on_cycles(), total_cycles=schedule.horizon)
    return ScheduleStats(
        events_per_appliance=[int(c) for c in per_app],
        unique_states=len(np.unique(schedule.states())),
        event_br=ratios.event_br,
        state_br=ratios.state_br,
    )


def overlap_ratio(train: EventSchedule, test: EventSchedule) -> float:
    """Share of the test schedule's distinct states also visited in training."""
    if train.n_appliances != test.n_appliances:
        raise ParameterError("schedules cover different appliance counts")
    test_states = set(test.states().tolist())
    return len(test_states & set(train.states().tolist())) / len(test_states)


# --------------------------------------------------------------------------
# JSON-lines file format

def dumps_schedule(schedule: EventSchedule) -> str:
    header = {
        "n_appliances": schedule.n_appliances,
        "dwell_cycles": schedule.dwell_cycles,
        "seed": schedule.seed,
        "params": schedule.params,
        "n_events": len(schedule.events),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps({"t": e.time_cycle, "a": e.appliance_id, "op": e.action.value})
              for e in schedule.events]
    return "\n".join(lines) + "\n"


def loads_schedule(text: str) -> EventSchedule:
    """Parse a schedule file.

    Every record ends with a newline, so a missing final newline means the
    file was cut short; so does an event count below the header's
    ``n_events`` when the header has one.
    """
    lines = text.splitlines()
    if not lines:
        raise FormatError("schedule file is empty")
    if not text.endswith("\n"):
        raise FormatError("schedule file is truncated: last line has no newline")
    try:
        header = json.loads(lines[0])
        n = int(header["n_appliances"])
        events = []
        for line in lines[1:]:
            if not line.strip():
                continue
            rec = json.loads(line)
            events.append(Event(int(rec["t"]), int(rec["a"]), Action(rec["op"])))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed schedule file: {exc}") from exc
    if "n_events" in header and header["n_events"] != len(events):
        raise FormatError(f"schedule header lists {header['n_events']} events, file has {len(events)}")
    schedule = EventSchedule(events, n, int(header.get("dwell_cycles", 1000)),
                             header.get("seed"), header.get("params") or {})
    try:
        schedule.validate()
    except ParameterError as exc:
        raise FormatError(f"inconsistent schedule file: {exc}") from exc
    return schedule


def save_schedule(schedule: EventSchedule, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_schedule(schedule))


def load_schedule(path) -> EventSchedule:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"schedule file is not UTF-8 text: {exc}") from exc
    return loads_schedule(text)
