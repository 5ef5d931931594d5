"""Streaming signal processing and training-data preparation.

Cycles are phase aligned (each one starts at an upward voltage zero
crossing), so a differential current is a plain sample-wise subtraction of
two cycles D apart.  Features are the first ten DFT harmonics of one cycle,
laid out as ``[real(1..10), imag(1..10), magnitude(1..10)]``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ParameterError
from .model import EventClassifier, EventReport, VoteState, event_class, vote_step, vote_stream
from .schedule import Action
from .simulate import CycleFrame, Trace

DEFAULT_D = 30
N_HARMONICS = 10
N_FEATURES = 3 * N_HARMONICS
MIN_SIMILARITY = 0.9
# allowed ratio between a candidate's harmonic amplitude and the reference's
MAX_SCALE = 1.25


# --------------------------------------------------------------------------
# Cycle buffer and RMS

class CycleRing:
    """Fixed-capacity ring of the most recent cycles' aggregate currents."""

    def __init__(self, capacity: int = DEFAULT_D, cycle_len: int = 320):
        if capacity < 1:
            raise ParameterError("ring capacity must be at least 1")
        self.capacity = int(capacity)
        self.cycle_len = int(cycle_len)
        self._buf = np.zeros((self.capacity, self.cycle_len))
        self._ids = np.zeros(self.capacity, dtype=np.int64)
        self._start = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @property
    def full(self) -> bool:
        return self._size == self.capacity

    @property
    def head_cycle_id(self) -> int | None:
        """Cycle id of the newest entry."""
        if not self._size:
            return None
        return int(self._ids[(self._start + self._size - 1) % self.capacity])

    def oldest(self) -> tuple[int, np.ndarray]:
        if not self._size:
            raise ParameterError("ring is empty")
        return int(self._ids[self._start]), self._buf[self._start]

    def push(self, cycle_id: int, samples) -> None:
        samples = np.asarray(samples, dtype=float)
        if samples.shape != (self.cycle_len,):
            raise ParameterError(f"expected {self.cycle_len} samples, got {samples.shape}")
        if self._size < self.capacity:
            slot = (self._start + self._size) % self.capacity
            self._size += 1
        else:
            slot = self._start
            self._start = (self._start + 1) % self.capacity
        self._buf[slot] = samples
        self._ids[slot] = cycle_id

    def cycles(self) -> np.ndarray:
        """Stored cycles, oldest first."""
        idx = (self._start + np.arange(self._size)) % self.capacity
        return self._buf[idx].copy()


def cycle_rms(frame) -> float | np.ndarray:
    """RMS over the last axis; accepts a CycleFrame or sample array(s)."""
    x = frame.aggregate_current if isinstance(frame, CycleFrame) else np.asarray(frame, dtype=float)
    r = np.sqrt(np.mean(np.square(x), axis=-1))
    return float(r) if np.ndim(r) == 0 else r


def denoised_rms(rms_window, drop_top: int = 0, drop_bottom: int = 0) -> float:
    """Mean of a window after dropping its ``drop_top`` largest and ``drop_bottom`` smallest values."""
    w = np.sort(np.asarray(rms_window, dtype=float))
    if drop_top < 0 or drop_bottom < 0:
        raise ParameterError("drop counts must be non-negative")
    if len(w) <= drop_top + drop_bottom:
        raise ParameterError(f"window of {len(w)} cannot drop {drop_top}+{drop_bottom} values")
    return float(w[drop_bottom:len(w) - drop_top].mean())


def rolling_denoised_rms(rms, window: int = 3, drop_top: int = 0, drop_bottom: int = 0) -> np.ndarray:
    """Trailing-window :func:`denoised_rms` along axis 0.

    The first ``window - 1`` rows repeat the first full window's value.
    """
    rms = np.asarray(rms, dtype=float)
    if window <= drop_top + drop_bottom:
        raise ParameterError(f"window of {window} cannot drop {drop_top}+{drop_bottom} values")
    if len(rms) < window:
        raise ParameterError("series shorter than the denoising window")
    view = np.lib.stride_tricks.sliding_window_view(rms, window, axis=0)
    view = np.sort(view, axis=-1)[..., drop_bottom:window - drop_top]
    out = view.mean(axis=-1)
    return np.concatenate([np.repeat(out[:1], window - 1, axis=0), out], axis=0)


# --------------------------------------------------------------------------
# Differential current and features

@dataclass
class DiffCurrent:
    samples: np.ndarray
    pair: tuple[int, int]


def ssdiff(ring: CycleRing, new_frame: CycleFrame) -> DiffCurrent | None:
    """New cycle minus the oldest cycle in a full ring; None while warming up.

    The new frame is pushed either way, so a ring of capacity D yields
    ``frame[i] - frame[i - D]``.
    """
    out = None
    if ring.full:
        old_id, old = ring.oldest()
        out = DiffCurrent(np.asarray(new_frame.aggregate_current, dtype=float) - old,
                          (old_id, int(new_frame.cycle_id)))
    ring.push(new_frame.cycle_id, new_frame.aggregate_current)
    return out


def batch_ssdiff(aggregate: np.ndarray, D: int = DEFAULT_D) -> np.ndarray:
    """All differentials ``aggregate[i] - aggregate[i - D]`` for i >= D."""
    if D < 1:
        raise ParameterError("differential interval must be at least 1")
    return aggregate[D:] - aggregate[:-D]


def harmonic_features(diff, mains_hz: float = 50.0, sample_rate: float = 16000.0) -> np.ndarray:
    """First ten harmonics of one cycle (or a stack of cycles along axis 0).

    Unnormalized forward DFT: a sine of amplitude A at harmonic k has
    magnitude ``A * cycle_len / 2`` in bin k.
    """
    x = diff.samples if isinstance(diff, DiffCurrent) else np.asarray(diff, dtype=float)
    L = x.shape[-1]
    expected = sample_rate / mains_hz
    if abs(L - expected) > 1e-9 * expected:
        raise ParameterError(f"{L} samples do not span one {mains_hz} Hz cycle at {sample_rate} Hz")
    if L // 2 < N_HARMONICS:
        raise ParameterError("cycle too short for ten harmonics")
    spec = np.fft.rfft(x, axis=-1)[..., 1:N_HARMONICS + 1]
    return np.concatenate([spec.real, spec.imag, np.abs(spec)], axis=-1)


def magnitudes(features) -> np.ndarray:
    return np.asarray(features)[..., 2 * N_HARMONICS:]


# --------------------------------------------------------------------------
# Training-data preparation

def _on_rms(trace: Trace) -> np.ndarray:
    if trace.individual_rms is not None:
        return np.asarray(trace.individual_rms, dtype=float)
    # without per-appliance currents every appliance sees the aggregate
    agg = cycle_rms(trace.aggregate)
    return np.repeat(agg[:, None], trace.n_appliances, axis=1)


def default_jump_thresholds(trace: Trace, fraction: float = 0.5) -> np.ndarray:
    """Per-appliance RMS jump thresholds: a fraction of the steady RMS."""
    L = trace.grid.cycle_len
    return np.array([fraction * cycle_rms(s.steady_waveform(L)) for s in trace.appliances])


def locate_obvious_events(trace: Trace, rms_jump_threshold=None, D: int = DEFAULT_D,
                          window: int = 3, drop_top: int = 0, drop_bottom: int = 0) -> list[tuple[int, int]]:
    """Find the cycle of each labeled event from its denoised RMS jump.

    For each label change the search covers +-2D cycles.  The jump at cycle
    j is ``s[j] - s[j - D]`` where ``s`` is the appliance's trailing denoised
    RMS.  The first cycle whose jump, in the event's direction, reaches the
    appliance's threshold is taken.  Events without one are dropped with a
    warning.  Returns sorted ``(cycle_id, class_label)`` pairs.
    """
    if rms_jump_threshold is None:
        rms_jump_threshold = default_jump_thresholds(trace)
    thr = np.broadcast_to(np.asarray(rms_jump_threshold, dtype=float), (trace.n_appliances,))
    s = rolling_denoised_rms(_on_rms(trace), window, drop_top, drop_bottom)
    n = len(trace)
    out, dropped = [], 0
    for cycle, app, action in trace.events():
        i = cycle - trace.first_cycle
        lo, hi = max(i - 2 * D, D), min(i + 2 * D + 1, n)
        if lo >= hi:
            dropped += 1
            continue
        jump = s[lo:hi, app] - s[lo - D:hi - D, app]
        if action is Action.OFF:
            jump = -jump
        hit = np.flatnonzero(jump >= thr[app])
        if not len(hit):
            dropped += 1
            continue
        out.append((trace.first_cycle + lo + int(hit[0]), event_class(app, action is Action.ON)))
    if dropped:
        warnings.warn(f"{dropped} events had no RMS jump above threshold and were dropped", stacklevel=2)
    return sorted(out)


def _change_cycles(trace: Trace) -> np.ndarray:
    """Trace-relative indices of every cycle whose label differs from the previous."""
    return np.flatnonzero(np.diff(trace.labels.astype(np.int64))) + 1


def _max_transient(trace: Trace) -> int:
    return max((s.transient_cycles for s in trace.appliances), default=0)


def augment_pairs(trace: Trace, event_cycle: int, n_side: int = 50, settle: int | None = None,
                  guard: int | None = None, changes: np.ndarray | None = None) -> np.ndarray:
    """All cross-side differentials around one event, oriented after - before.

    Stable cycles before the event start ``guard`` cycles after the previous
    label change; stable cycles after it start ``settle`` cycles after the
    event and end before the next label change.  Both default to the longest
    transient in the catalog.  Returns an ``(n_before * n_after, cycle_len)``
    array, with a warning when fewer than ``n_side`` cycles fit on a side.
    """
    if n_side < 1:
        raise ParameterError("n_side must be at least 1")
    tmax = _max_transient(trace)
    settle = tmax if settle is None else settle
    guard = tmax if guard is None else guard
    if changes is None:
        changes = _change_cycles(trace)
    e = int(event_cycle) - trace.first_cycle
    prev = changes[changes < e]
    nxt = changes[changes > e]
    # the located cycle may trail the label change by a few cycles
    label_change = int(prev[-1]) if len(prev) and e - prev[-1] <= settle else e
    prev = changes[changes < label_change]
    before_lo = int(prev[-1]) + guard if len(prev) else 0
    before = np.arange(max(before_lo, label_change - n_side), label_change)
    after_lo = max(e, label_change + settle)
    after_hi = int(nxt[0]) if len(nxt) else len(trace)
    after = np.arange(after_lo, min(after_lo + n_side, after_hi))
    if len(before) < n_side or len(after) < n_side:
        warnings.warn(f"event at cycle {event_cycle}: only {len(before)}x{len(after)} stable pairs",
                      stacklevel=2)
    agg = trace.aggregate
    return (agg[after][:, None, :] - agg[before][None, :, :]).reshape(-1, agg.shape[1])


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    return np.divide(np.sum(a * b, axis=-1), denom, out=np.zeros(np.broadcast(na, nb).shape),
                     where=denom > 0)


def filter_samples(candidates, reference_signature, min_similarity: float = MIN_SIMILARITY,
                   mains_hz: float = 50.0, sample_rate: float = 16000.0,
                   max_scale: float | None = MAX_SCALE) -> np.ndarray:
    """Keep candidates whose harmonics resemble the reference.

    ``candidates`` are differential cycles, shape (N, cycle_len); the
    reference is a feature vector.  A candidate passes when the cosine
    similarity of the harmonic magnitudes, and the absolute cosine of the
    complex spectra, both reach ``min_similarity``, and its magnitude norm is
    within a factor ``max_scale`` of the reference's.  Cycles are aligned to
    voltage zero crossings, so the phases are comparable; the absolute value
    lets ON and OFF candidates match the same reference.  ``max_scale=None``
    leaves only the magnitude test.  Returns the boolean mask.
    """
    cand = np.atleast_2d(np.asarray(candidates, dtype=float))
    ref = np.asarray(reference_signature, dtype=float)
    if len(cand) == 0:
        return np.zeros(0, dtype=bool)
    feats = harmonic_features(cand, mains_hz, sample_rate)
    mag, ref_mag = magnitudes(feats), magnitudes(ref)
    keep = cosine_similarity(mag, ref_mag[None, :]) >= min_similarity
    if max_scale is not None:
        cx = 2 * N_HARMONICS
        keep &= np.abs(cosine_similarity(feats[:, :cx], ref[None, :cx])) >= min_similarity
        scale = np.linalg.norm(mag, axis=1) / max(np.linalg.norm(ref_mag), 1e-300)
        keep &= (scale <= max_scale) & (scale >= 1 / max_scale)
    if not keep.any():
        warnings.warn("no candidate passed the similarity filter", stacklevel=2)
    return keep


def reference_signature(trace: Trace, appliance_id: int) -> np.ndarray:
    L = trace.grid.cycle_len
    wave = trace.appliances[appliance_id].steady_waveform(L)
    return harmonic_features(wave, trace.grid.mains_hz, trace.grid.sample_rate_hz)


def idle_pairs(trace: Trace, count: int, seed: int = 0, min_gap: int = 10, max_gap: int = 50,
               guard: int | None = None) -> np.ndarray:
    """Differentials between cycles that share one settled state.

    Gaps are drawn uniformly from ``[min_gap, max_gap]`` so the samples do
    not depend on the differential interval used at inference.
    """
    rng = np.random.default_rng(seed)
    guard = _max_transient(trace) if guard is None else guard
    n = len(trace)
    changes = np.zeros(n, dtype=np.int64)
    changes[_change_cycles(trace)] = 1
    csum = np.concatenate([[0], np.cumsum(changes)])
    olds, news = [], []
    tries = 0
    while len(news) < count and tries < 50 * count + 100:
        tries += 1
        need = count - len(news)
        gap = rng.integers(min_gap, max_gap + 1, size=2 * need)
        new = rng.integers(0, n, size=2 * need)
        old = new - gap
        lo = np.maximum(old - guard, 0)
        ok = (old >= 0) & (csum[new + 1] - csum[lo + 1] == 0)
        olds += list(old[ok][:need])
        news += list(new[ok][:need])
    if len(news) < count:
        warnings.warn(f"only {len(news)} of {count} idle pairs found", stacklevel=2)
    return trace.aggregate[np.array(news, dtype=int)] - trace.aggregate[np.array(olds, dtype=int)]


@dataclass
class TrainingSet:
    features: np.ndarray
    labels: np.ndarray
    n_appliances: int
    info: dict

    def __len__(self) -> int:
        return len(self.labels)


def prepare_training_set(trace: Trace, events: Sequence[tuple[int, int]] | None = None, n_side: int = 50,
                         idle_share: float = 1.0, min_similarity: float = MIN_SIMILARITY,
                         seed: int = 0, max_per_event: int | None = None) -> TrainingSet:
    """Turn a labeled trace into (feature, class) samples.

    ``events`` are ``(cycle_id, class_label)`` pairs and default to the
    located events of the trace.  Each event contributes its augmented pairs
    that pass the similarity filter.  IDLE samples are drawn from settled
    stretches; their count is ``idle_share`` times the mean per-class count.
    """
    grid = trace.grid
    n_app = trace.n_appliances
    idle = 2 * n_app
    if events is None:
        events = locate_obvious_events(trace)
    rng = np.random.default_rng(seed)
    changes = _change_cycles(trace)
    refs = {a: reference_signature(trace, a) for a in range(n_app)}
    feats, labels = [], []
    filtered = 0
    for cycle, cls in events:
        pairs = augment_pairs(trace, cycle, n_side, changes=changes)
        if not len(pairs):
            continue
        keep = filter_samples(pairs, refs[cls // 2], min_similarity, grid.mains_hz, grid.sample_rate_hz)
        filtered += int((~keep).sum())
        pairs = pairs[keep]
        if max_per_event is not None and len(pairs) > max_per_event:
            pairs = pairs[rng.choice(len(pairs), max_per_event, replace=False)]
        feats.append(harmonic_features(pairs, grid.mains_hz, grid.sample_rate_hz))
        labels.append(np.full(len(pairs), cls, dtype=np.int64))
    n_event = sum(len(lab) for lab in labels)
    n_classes_seen = len({int(c) for _, c in events}) or 1
    n_idle = int(round(idle_share * n_event / n_classes_seen))
    if n_idle:
        pairs = idle_pairs(trace, n_idle, seed=int(rng.integers(2**31)))
        feats.append(harmonic_features(pairs, grid.mains_hz, grid.sample_rate_hz))
        labels.append(np.full(len(pairs), idle, dtype=np.int64))
    X = np.concatenate(feats) if feats else np.zeros((0, N_FEATURES))
    y = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    info = {"events": len(events), "filtered_out": filtered, "event_samples": n_event, "idle_samples": n_idle}
    return TrainingSet(X, y, n_app, info)


# binary training-sample file: records of {u16 label, f32 features[30]}
_SAMPLE_DTYPE = np.dtype([("label", "<u2"), ("features", "<f4", (N_FEATURES,))])


def samples_to_bytes(ts: TrainingSet) -> bytes:
    rec = np.zeros(len(ts), dtype=_SAMPLE_DTYPE)
    rec["label"] = ts.labels
    rec["features"] = ts.features
    return rec.tobytes()


def samples_from_bytes(data: bytes, n_appliances: int, info: dict | None = None) -> TrainingSet:
    if len(data) % _SAMPLE_DTYPE.itemsize:
        raise FormatError("truncated training-sample file")
    rec = np.frombuffer(data, dtype=_SAMPLE_DTYPE)
    if len(rec) and rec["label"].max() > 2 * n_appliances:
        raise FormatError("sample label out of range")
    return TrainingSet(rec["features"].astype(np.float64), rec["label"].astype(np.int64), n_appliances,
                       dict(info or {}))


def sidecar(ts: TrainingSet, names: Sequence[str] | None = None) -> dict:
    classes = {}
    for a in range(ts.n_appliances):
        name = names[a] if names else str(a)
        classes[str(event_class(a, True))] = {"appliance": a, "name": name, "action": "on"}
        classes[str(event_class(a, False))] = {"appliance": a, "name": name, "action": "off"}
    classes[str(2 * ts.n_appliances)] = {"appliance": None, "name": "IDLE", "action": "idle"}
    return {"format": "loadid-training-samples", "version": 1, "record": "<u2 label, <f4[30] features",
            "n_appliances": ts.n_appliances, "n_samples": len(ts), "classes": classes, "info": ts.info}


def save_samples(ts: TrainingSet, path, names: Sequence[str] | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(samples_to_bytes(ts))
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar(ts, names), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_samples(path) -> TrainingSet:
    try:
        with open(str(path) + ".json", encoding="utf-8") as fh:
            meta = json.load(fh)
        n_app = int(meta["n_appliances"])
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"missing or malformed sample sidecar: {exc}") from exc
    with open(path, "rb") as fh:
        ts = samples_from_bytes(fh.read(), n_app, meta.get("info"))
    if len(ts) != meta.get("n_samples", len(ts)):
        raise FormatError("sample count disagrees with sidecar")
    return ts


# --------------------------------------------------------------------------
# Inference

class StreamRecognizer:
    """Cycle-by-cycle recognizer: ring buffer, features, classifier, voting."""

    def __init__(self, model: EventClassifier, thresholds, D: int = DEFAULT_D,
                 mains_hz: float = 50.0, sample_rate: float = 16000.0):
        self.model = model
        self.D = D
        self.mains_hz = mains_hz
        self.sample_rate = sample_rate
        self.ring = CycleRing(D, int(round(sample_rate / mains_hz)))
        self.vote = VoteState(np.asarray(thresholds), D)

    def step(self, frame: CycleFrame) -> EventReport | None:
        diff = ssdiff(self.ring, frame)
        if diff is None:
            return None
        x = harmonic_features(diff, self.mains_hz, self.sample_rate)
        return vote_step(self.vote, self.model.predict_one(x), int(frame.cycle_id))

    def run(self, frames: Iterable[CycleFrame]) -> list[EventReport]:
        return [r for r in map(self.step, frames) if r is not None]


def cycle_predictions(trace: Trace, model: EventClassifier, D: int = DEFAULT_D,
                      chunk: int = 20000) -> tuple[np.ndarray, np.ndarray]:
    """Per-cycle classifier outputs for cycles D onward, with their cycle ids."""
    grid = trace.grid
    preds = []
    for s in range(D, len(trace), chunk):
        e = min(s + chunk, len(trace))
        diff = trace.aggregate[s:e] - trace.aggregate[s - D:e - D]
        preds.append(model.predict(harmonic_features(diff, grid.mains_hz, grid.sample_rate_hz)))
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return trace.cycle_ids[D:], pred


def recognize(trace: Trace, model: EventClassifier, thresholds, D: int = DEFAULT_D) -> list[EventReport]:
    """Batch equivalent of running :class:`StreamRecognizer` over the trace."""
    ids, pred = cycle_predictions(trace, model, D)
    return vote_stream(pred, ids, thresholds, D)
