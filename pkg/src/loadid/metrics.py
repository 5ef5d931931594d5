"""Dataset balance and diversity, event matching, F1 scores and SINR.

Events are ``(cycle, class_label)`` pairs throughout.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateInputError, FormatError, ParameterError

DEFAULT_TOLERANCE = 50
SINR_CAP = 1e9


def balance_ratio(counts) -> float:
    """N_min / N_max over categories; 0 when every count is zero."""
    counts = np.asarray(counts, dtype=float)
    if counts.size == 0 or counts.max() <= 0:
        return 0.0
    if counts.min() < 0:
        raise ParameterError("counts must be non-negative")
    return float(counts.min() / counts.max())


class BalanceRatios(NamedTuple):
    event_br: float
    state_br: float
    avg_on_off_br: float


def balance_ratios(event_counts, on_state_cycles, total_cycles=None) -> BalanceRatios:
    """Category balance ratios of a dataset.

    ``event_counts`` and ``on_state_cycles`` are per-appliance sequences or
    ``{appliance: count}`` maps.  ``avg_on_off_br`` needs the total cycle
    count to know the OFF durations and is NaN without it.
    """
    events = _as_counts(event_counts)
    on = _as_counts(on_state_cycles)
    if total_cycles is None:
        avg = math.nan
    else:
        off = np.asarray(total_cycles, dtype=float) - on
        if np.any(off < 0):
            raise ParameterError("ON cycles exceed the total")
        hi = np.maximum(on, off)
        per = np.divide(np.minimum(on, off), hi, out=np.zeros_like(hi), where=hi > 0)
        avg = float(per.mean())
    return BalanceRatios(balance_ratio(events), balance_ratio(on), avg)


def _as_counts(x) -> np.ndarray:
    if isinstance(x, dict):
        x = [x[k] for k in sorted(x)]
    return np.asarray(list(x), dtype=float)


class Diversity(NamedTuple):
    unique_states: int
    diversity_density: float


def diversity(source, mains_hz: float = 50.0) -> Diversity:
    """Distinct state combinations and how many appear per hour."""
    if hasattr(source, "labels"):
        states = np.asarray(source.labels)
        hours = len(states) / mains_hz / 3600.0
    else:
        states = source.states()
        hours = source.duration_hours(mains_hz)
    n = len(np.unique(states))
    return Diversity(n, n / hours if hours > 0 else math.inf)


# --------------------------------------------------------------------------
# Event matching and F1

@dataclass(frozen=True)
class EventMatch:
    truth: tuple[int, int] | None
    predicted: tuple[int, int] | None
    outcome: str
    tolerance_cycles: int = DEFAULT_TOLERANCE


def match_events(truth: Sequence[tuple[int, int]], predicted: Sequence[tuple[int, int]],
                 tolerance_cycles: int = DEFAULT_TOLERANCE) -> list[EventMatch]:
    """Greedy one-to-one matching, closest same-class pairs first."""
    truth = [tuple(map(int, t)) for t in truth]
    predicted = [tuple(map(int, p)) for p in predicted]
    by_class: dict[int, list[int]] = {}
    for j, (_, c) in enumerate(predicted):
        by_class.setdefault(c, []).append(j)
    candidates = []
    for i, (tc, c) in enumerate(truth):
        for j in by_class.get(c, ()):
            gap = abs(predicted[j][0] - tc)
            if gap <= tolerance_cycles:
                candidates.append((gap, tc, predicted[j][0], i, j))
    candidates.sort()
    t_used, p_used = {}, set()
    for _, _, _, i, j in candidates:
        if i not in t_used and j not in p_used:
            t_used[i] = j
            p_used.add(j)
    out = []
    for i, t in enumerate(truth):
        if i in t_used:
            out.append(EventMatch(t, predicted[t_used[i]], "TP", tolerance_cycles))
        else:
            out.append(EventMatch(t, None, "FN", tolerance_cycles))
    out += [EventMatch(None, p, "FP", tolerance_cycles) for j, p in enumerate(predicted) if j not in p_used]
    return out


@dataclass
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricReport:
    per_class: dict[int, ClassScore] = field(default_factory=dict)
    average_f1: float = 0.0
    weighted_f1: float = 0.0
    event_br: float | None = None
    state_br: float | None = None
    avg_on_off_br: float | None = None
    unique_states: int | None = None
    diversity_density: float | None = None
    state_f1: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in d["per_class"].items()}
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        try:
            d = json.loads(text)
            d["per_class"] = {int(k): ClassScore(**v) for k, v in d["per_class"].items()}
            return cls(**d)
        except (ValueError, TypeError, KeyError, AttributeError) as exc:
            raise FormatError(f"malformed metric report: {exc}") from exc

    def to_csv(self, class_names: dict[int, str] | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "name", "precision", "recall", "f1", "support"])
        for c in sorted(self.per_class):
            s = self.per_class[c]
            name = (class_names or {}).get(c, "")
            w.writerow([c, name, f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}", s.support])
        return buf.getvalue()


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def f1_scores(matches: Iterable[EventMatch], classes: Iterable[int] | None = None) -> MetricReport:
    tp: dict[int, int] = {}
    fp: dict[int, int] = {}
    fn: dict[int, int] = {}
    for m in matches:
        if m.outcome == "TP":
            tp[m.truth[1]] = tp.get(m.truth[1], 0) + 1
        elif m.outcome == "FP":
            fp[m.predicted[1]] = fp.get(m.predicted[1], 0) + 1
        else:
            fn[m.truth[1]] = fn.get(m.truth[1], 0) + 1
    keys = set(tp) | set(fp) | set(fn) | set(classes or ())
    per_class = {}
    for c in sorted(keys):
        t, p, n = tp.get(c, 0), fp.get(c, 0), fn.get(c, 0)
        prec = _ratio(t, t + p)
        rec = _ratio(t, t + n)
        per_class[c] = ClassScore(prec, rec, _ratio(2 * prec * rec, prec + rec), t + n)
    supported = [s for s in per_class.values() if s.support > 0]
    total = sum(s.support for s in supported)
    return MetricReport(
        per_class=per_class,
        average_f1=float(np.mean([s.f1 for s in supported])) if supported else 0.0,
        weighted_f1=_ratio(sum(s.f1 * s.support for s in supported), total),
    )


def event_report(truth, predicted, tolerance_cycles: int = DEFAULT_TOLERANCE, classes=None) -> MetricReport:
    return f1_scores(match_events(truth, predicted, tolerance_cycles), classes)


# --------------------------------------------------------------------------
# State identification

def states_from_reports(reports: Iterable[tuple[int, int]], initial_state: int, n_cycles: int,
                        n_appliances: int, first_cycle: int = 0) -> np.ndarray:
    """Per-cycle ON/OFF estimate driven by reported (cycle, class) events.

    An ON report sets its appliance ON from that cycle onward and an OFF
    report clears it.  Returns an (n_cycles, n_appliances) boolean array.
    """
    est = np.zeros((n_cycles, n_appliances), dtype=bool)
    current = np.array([(initial_state >> a) & 1 for a in range(n_appliances)], dtype=bool)
    cursor = 0
    for cycle, cls in sorted((int(c), int(k)) for c, k in reports):
        app, is_off = divmod(cls, 2)
        if app >= n_appliances:
            continue
        i = min(max(cycle - first_cycle, 0), n_cycles)
        est[cursor:i] = current
        cursor = i
        current[app] = not is_off
    est[cursor:] = current
    return est


def state_f1(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-appliance F1 of the ON class over cycles.

    An appliance never ON in either array scores 1.0.
    """
    tp = (estimate & truth).sum(axis=0).astype(float)
    fp = (estimate & ~truth).sum(axis=0)
    fn = (~estimate & truth).sum(axis=0)
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, np.divide(2 * tp, denom, out=np.ones_like(tp), where=denom > 0), 1.0)


def state_identify(trace, model, thresholds, diff_interval: int = 30):
    """Run streaming recognition over ``trace`` and score per-cycle states.

    Returns ``(estimate, per_appliance_f1)``.
    """
    from .pipeline import recognize

    reports = recognize(trace, model, thresholds, diff_interval)
    est = states_from_reports([(r.cycle_id, r.class_label) for r in reports], int(trace.labels[0]),
                              len(trace), trace.n_appliances, trace.first_cycle)
    return est, state_f1(est, trace.label_bits())


# --------------------------------------------------------------------------
# SINR

def estimate_sinr(trace, appliance_id: int, mode: str = "raw", diff_interval: int = 30,
                  settle: int | None = None) -> float:
    """Signal-to-interference-plus-noise ratio of one appliance's events.

    Powers are apparent, ``V_rms * I_rms``.  RAW compares the appliance's ON
    current with everything else in the aggregate over the cycles following
    each switch-on.  DIFF compares the steady-state differential current of
    pairs straddling each switch with differential currents taken between
    cycles that share one state.  Needs per-appliance currents.
    """
    if trace.individual is None:
        raise ParameterError("SINR estimation needs per-appliance currents")
    bits = trace.label_bits()
    if not bits[:, appliance_id].any():
        raise DegenerateInputError(f"appliance {appliance_id} is never ON")
    D = diff_interval
    vrms = trace.grid.voltage_rms_v
    if settle is None:
        settle = trace.appliances[appliance_id].transient_cycles if trace.appliances else 0

    def rms(x):
        return np.sqrt(np.mean(np.square(x), axis=-1))

    switches = [(c - trace.first_cycle, a, act) for c, a, act in trace.events() if a == appliance_id]
    mode = mode.lower()
    if mode == "raw":
        target = trace.individual[:, appliance_id, :]
        rest = trace.aggregate - target
        cycles = []
        for i, _, act in switches:
            if act.value == "on":
                cycles += range(i + settle, min(i + settle + D, len(trace)))
        if not cycles:
            cycles = list(np.nonzero(bits[:, appliance_id])[0])
        cycles = np.asarray(cycles)
        signal = np.mean(rms(target[cycles]))
        interference = np.mean(rms(rest[cycles]))
        return SINR_CAP if interference == 0 else float(signal * vrms / (interference * vrms))
    if mode == "diff":
        changes = np.zeros(len(trace), dtype=bool)
        changes[1:] = np.any(bits[1:] != bits[:-1], axis=1)
        agg = trace.aggregate
        event_pairs, quiet_pairs = [], []
        for i, _, _ in switches:
            for new in range(i + settle, i + D):
                if 0 <= new - D and new < len(trace) and not changes[new - D + 1:i].any() \
                        and not changes[i + 1:new + 1].any():
                    event_pairs.append(new)
        # quiet pairs: no label change within (new - D - max transient, new]
        guard = max((s.transient_cycles for s in trace.appliances), default=0)
        csum = np.concatenate([[0], np.cumsum(changes)])
        for new in range(D + guard, len(trace)):
            if csum[new + 1] - csum[new - D - guard + 1] == 0:
                quiet_pairs.append(new)
        if not event_pairs:
            raise DegenerateInputError("no clean differential pair straddles an event")
        ev = np.asarray(event_pairs)
        qt = np.asarray(quiet_pairs)
        signal = np.mean(rms(agg[ev] - agg[ev - D]))
        noise = np.mean(rms(agg[qt] - agg[qt - D])) if len(qt) else 0.0
        return SINR_CAP if noise == 0 else float(signal / noise)
    raise ParameterError(f"unknown SINR mode {mode!r}")
