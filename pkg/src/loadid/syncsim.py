"""Two-node sampling synchronization: shared perceptible time vs beacon clocks.

Both nodes sample the same mains voltage with their own free-running ADC
clocks.  A current surge happens at a random instant and each node records
it at its first sample after the surge.

* SPT: a node timestamps a sample by (cycle id, phase index), the phase
  index being the distance in samples from the cycle's upward voltage zero
  crossing.  The zero crossing is a physical event both nodes see, so the
  only error left is each node's sample quantization (plus zero-crossing
  estimation noise).
* TSF: a node timestamps the sample with its beacon-synchronized local clock,
  which carries network jitter and occasional ~1 ms outliers.

Times are in microseconds.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import EmptyInputError, NoCrossingError, ParameterError

# direction check: samples summed on each side of a candidate crossing
CHATTER_SPAN = 8


@dataclass(frozen=True)
class TimestampJitter:
    std: float = 0.0
    outlier_prob: float = 0.0
    outlier_shift_us: float = 0.0
    outlier_spread_us: float = 0.0

    def __post_init__(self):
        if self.std < 0 or self.outlier_spread_us < 0:
            raise ParameterError("jitter spreads must be non-negative")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ParameterError("outlier_prob must lie in [0, 1]")


@dataclass(frozen=True)
class NodeClock:
    """Local clock: ``local = true * (1 + drift_ppm * 1e-6) + offset_us``.

    The ADC samples at multiples of the nominal sampling interval on the
    local clock.  ``timestamp_jitter_us`` is the residual error of the node's
    beacon-synchronized timestamps.
    """
    offset_us: float = 0.0
    drift_ppm: float = 0.0
    timestamp_jitter_us: TimestampJitter = field(default_factory=TimestampJitter)

    @classmethod
    def from_dict(cls, d) -> "NodeClock":
        j = d.get("timestamp_jitter_us", {})
        return cls(float(d.get("offset_us", 0.0)), float(d.get("drift_ppm", 0.0)), TimestampJitter(**j))

    def to_dict(self) -> dict:
        return asdict(self)


# Beacon-clock baseline calibrated by Monte-Carlo so the pairwise error has
# mean near 33 us, about 99.55% of errors under 220 us and about 0.33% in
# 980-1060 us.  Sample quantization smears the 1 ms mode, so a larger share
# under 220 us would leave too little mass in that band.
TSF_DEFAULT = TimestampJitter(std=17.5, outlier_prob=0.0023, outlier_shift_us=1020.0, outlier_spread_us=15.0)

NAMED_JITTER = {"tsf_default": TSF_DEFAULT, "none": TimestampJitter()}


@dataclass(frozen=True)
class SyncConfig:
    mains_hz: float = 50.0
    sample_rate_hz: float = 16000.0
    voltage_noise_rel: float = 1e-4
    # extra propagation delay of the voltage seen by node B
    cable_delay_us: float = 0.0
    # probability that a node's beacon time is off by beacon_error_ms
    beacon_error_prob: float = 0.0
    beacon_error_ms: float = 15.0
    # mean spacing between consecutive surges, seconds
    event_spacing_s: float = 2.0

    @property
    def sample_interval_us(self) -> float:
        return 1e6 / self.sample_rate_hz

    @property
    def cycle_us(self) -> float:
        return 1e6 / self.mains_hz

    @property
    def cycle_len(self) -> float:
        return self.sample_rate_hz / self.mains_hz


DEFAULT_CLOCK_A = NodeClock(0.0, 12.0, TSF_DEFAULT)
DEFAULT_CLOCK_B = NodeClock(17.3, -8.0, TSF_DEFAULT)


class SptTimestamp(NamedTuple):
    cycle_id: int
    phase_index: float


class SyncTrial(NamedTuple):
    true_event_time_us: float
    node_a_estimate_us: float
    node_b_estimate_us: float
    abs_error_us: float
    flagged: bool = False


# --------------------------------------------------------------------------
# Zero crossings

def detect_zero_crossings(voltage, min_spacing: float | None = None, refine: bool = True) -> np.ndarray:
    """Upward zero crossings as fractional sample indices.

    Coarse positions come from linear interpolation between the bracketing
    samples.  A sign change only counts when the samples just before it sum
    negative and those just after sum positive, which rejects noise chatter
    around downward crossings.  Crossings closer than ``min_spacing`` to a
    kept one are dropped; by default that is half the median spacing.  When
    the stream holds two or more crossings each one is refined by fitting a
    sine at the stream's mean crossing frequency to the cycle around it,
    which averages out voltage noise.
    """
    v = np.asarray(voltage, dtype=float)
    kept = _coarse_crossings(v, min_spacing)
    if not refine or len(kept) < 2:
        return kept
    period = (kept[-1] - kept[0]) / (len(kept) - 1)
    return np.array([_refine(v, c, int(period), 2 * np.pi / period) for c in kept])


def _coarse_crossings(v: np.ndarray, min_spacing: float | None) -> np.ndarray:
    if v.ndim != 1 or len(v) < 2:
        raise NoCrossingError("need a 1-D voltage stream")
    k = np.flatnonzero((v[:-1] <= 0) & (v[1:] > 0))
    csum = np.concatenate([[0.0], np.cumsum(v)])
    w = CHATTER_SPAN
    before = csum[k + 1] - csum[np.maximum(k + 1 - w, 0)]
    after = csum[np.minimum(k + 1 + w, len(v))] - csum[k + 1]
    k = k[(before <= 0) & (after > 0)]
    if not len(k):
        raise NoCrossingError("voltage stream has no upward zero crossing")
    coarse = k + (-v[k]) / (v[k + 1] - v[k])
    if min_spacing is None:
        big = np.diff(coarse)
        min_spacing = 0.5 * float(np.median(big[big > 1])) if np.any(big > 1) else 1.0
    kept = [coarse[0]]
    for c in coarse[1:]:
        if c - kept[-1] >= min_spacing:
            kept.append(c)
    return np.array(kept)


def _refine(v: np.ndarray, c: float, h: int, omega: float) -> float:
    """Least-squares fit of ``a sin + b cos + d`` at the stream frequency near ``c``."""
    lo = max(int(math.ceil(c - h)), 0)
    hi = min(int(math.floor(c + h)), len(v) - 1)
    if hi - lo < 4:
        return float(c)
    x = np.arange(lo, hi + 1) - c
    A = np.stack([np.sin(omega * x), np.cos(omega * x), np.ones(len(x))])
    try:
        a, b, d = np.linalg.solve(A @ A.T, A @ v[lo:hi + 1])
    except np.linalg.LinAlgError:
        return float(c)
    R = math.hypot(a, b)
    if R == 0 or abs(d) >= R:
        return float(c)
    # R sin(omega x + phi) + d rises through zero where omega x + phi = asin(-d / R)
    phi = math.atan2(b, a)
    r = (math.asin(-d / R) - phi) / omega
    r = (r + np.pi / omega) % (2 * np.pi / omega) - np.pi / omega
    # a refinement that wanders far from the coarse estimate means the fit was poor
    return float(c + r) if abs(r) <= 0.25 * h else float(c)


# --------------------------------------------------------------------------
# Node captures

@dataclass
class NodeCapture:
    """What one node records around one surge.

    ``voltage`` holds the samples, ``surge_index`` the first sample at or
    after the surge, ``sample_times_us`` the true sample instants (used only
    for ground truth and the beacon baseline), and ``beacon_error_us`` the
    error of the node's coarse beacon time used for cycle ids.
    """
    voltage: np.ndarray
    surge_index: int
    sample_times_us: np.ndarray
    beacon_error_us: float = 0.0
    timestamp_error_us: float = 0.0


def capture(clock: NodeClock, config: SyncConfig, event_time_us: float, rng: np.random.Generator,
            delay_us: float = 0.0, beacon_error_us: float = 0.0, cycles_before: int = 1,
            cycles_after: int = 2) -> NodeCapture:
    """Sample the mains voltage around one surge on a node's clock."""
    Ts = config.sample_interval_us
    T = config.cycle_us
    rate = 1.0 + clock.drift_ppm * 1e-6
    c_e = math.floor((event_time_us - delay_us) / T)
    t0 = (c_e - cycles_before) * T + delay_us - 2 * Ts
    t1 = (c_e + cycles_after + 1) * T + delay_us
    k0 = math.ceil((t0 * rate + clock.offset_us) / Ts)
    k1 = math.floor((t1 * rate + clock.offset_us) / Ts)
    k = np.arange(k0, k1 + 1)
    times = (k * Ts - clock.offset_us) / rate
    v = np.sin(2 * np.pi * config.mains_hz * (times - delay_us) * 1e-6)
    if config.voltage_noise_rel > 0:
        v = v + rng.normal(0.0, config.voltage_noise_rel, len(v))
    surge = int(np.searchsorted(times, event_time_us, side="left"))
    j = clock.timestamp_jitter_us
    err = rng.normal(0.0, j.std) if j.std > 0 else 0.0
    if j.outlier_prob > 0 and rng.random() < j.outlier_prob:
        err += j.outlier_shift_us + (rng.uniform(-j.outlier_spread_us, j.outlier_spread_us)
                                     if j.outlier_spread_us > 0 else 0.0)
    return NodeCapture(v, surge, times, beacon_error_us, err)


def spt_timestamp(cap: NodeCapture, config: SyncConfig) -> tuple[SptTimestamp, float]:
    """SPT timestamp of the surge sample and its position on the common timeline.

    The cycle id comes from the beacon time of the cycle's first sample, which
    only has to be right to within half a cycle.  The phase index is turned
    into time with the cycle length measured between zero crossings, so the
    node's clock drift cancels.
    """
    v = np.asarray(cap.voltage, dtype=float)
    z = _coarse_crossings(v, 0.5 * config.cycle_len)
    i = int(np.searchsorted(z, cap.surge_index, side="right")) - 1
    if i < 0:
        raise NoCrossingError("no zero crossing precedes the surge")
    # only the crossings bounding the surge's cycle need refining
    period = (z[-1] - z[0]) / (len(z) - 1) if len(z) > 1 else config.cycle_len
    j = i + 1 if i + 1 < len(z) else i - 1
    for n in {i, j} - {-1}:
        z[n] = _refine(v, z[n], int(period), 2 * np.pi / period)
    measured = abs(z[j] - z[i]) if j >= 0 else config.cycle_len
    first = min(int(math.ceil(z[i])), len(cap.sample_times_us) - 1)
    beacon_us = cap.sample_times_us[first] + cap.beacon_error_us
    cycle_id = int(math.floor(beacon_us / config.cycle_us + 0.5))
    phase = float(cap.surge_index - z[i])
    return SptTimestamp(cycle_id, phase), (cycle_id + phase / measured) * config.cycle_us


def tsf_timestamp(cap: NodeCapture) -> float:
    """Beacon-clock timestamp of the surge sample at 1 us resolution."""
    return float(np.round(cap.sample_times_us[cap.surge_index] + cap.timestamp_error_us))


# --------------------------------------------------------------------------
# Alignment

def spt_align(node_a: Sequence[NodeCapture], node_b: Sequence[NodeCapture], config: SyncConfig,
              true_times: Sequence[float] | None = None) -> list[SyncTrial]:
    """Pairwise SPT errors; trials with a wrong cycle id are flagged."""
    out = []
    for n, (a, b) in enumerate(zip(node_a, node_b)):
        (sa, ta), (sb, tb) = spt_timestamp(a, config), spt_timestamp(b, config)
        truth = float(true_times[n]) if true_times is not None else math.nan
        # a surge near a zero crossing may legitimately land in adjacent cycles
        # on the two nodes; only a disagreement of half a cycle or more is a
        # beacon failure
        err = abs(ta - tb)
        out.append(SyncTrial(truth, ta, tb, err, err >= 0.5 * config.cycle_us))
    return out


def tsf_align(node_a: Sequence[NodeCapture], node_b: Sequence[NodeCapture],
              true_times: Sequence[float] | None = None) -> list[SyncTrial]:
    out = []
    for n, (a, b) in enumerate(zip(node_a, node_b)):
        ta, tb = tsf_timestamp(a), tsf_timestamp(b)
        truth = float(true_times[n]) if true_times is not None else math.nan
        out.append(SyncTrial(truth, ta, tb, abs(ta - tb)))
    return out


class SyncResult(NamedTuple):
    spt: list[SyncTrial]
    tsf: list[SyncTrial]

    @property
    def flagged(self) -> int:
        return sum(t.flagged for t in self.spt)


def simulate(n_trials: int, clock_a: NodeClock = DEFAULT_CLOCK_A, clock_b: NodeClock = DEFAULT_CLOCK_B,
             config: SyncConfig = SyncConfig(), seed: int = 0) -> SyncResult:
    """Monte-Carlo comparison of SPT and the beacon baseline on shared surges.

    Surges are spaced by a random 0.5x-1.5x of ``config.event_spacing_s`` and
    land at a uniformly random point of their cycle.  Each trial draws from
    its own child random stream, so results do not depend on how trials are
    split across workers.
    """
    if n_trials < 1:
        raise ParameterError("need at least one trial")
    if not 0.0 <= config.beacon_error_prob <= 1.0:
        raise ParameterError("beacon_error_prob must lie in [0, 1]")
    root = np.random.SeedSequence(seed)
    timing = np.random.default_rng(root.spawn(1)[0])
    spacing = config.event_spacing_s * 1e6 * timing.uniform(0.5, 1.5, n_trials)
    times = np.cumsum(spacing)
    caps_a, caps_b = [], []
    for n, ss in enumerate(root.spawn(n_trials)):
        rng = np.random.default_rng(ss)
        be = [config.beacon_error_ms * 1e3 if rng.random() < config.beacon_error_prob else 0.0
              for _ in range(2)]
        caps_a.append(capture(clock_a, config, times[n], rng, 0.0, be[0]))
        caps_b.append(capture(clock_b, config, times[n], rng, config.cable_delay_us, be[1]))
    return SyncResult(spt_align(caps_a, caps_b, config, times), tsf_align(caps_a, caps_b, times))


# --------------------------------------------------------------------------
# CDF

def error_cdf(trials: Sequence[SyncTrial]) -> list[tuple[float, float]]:
    """Empirical CDF of unflagged errors as (error_us, cumulative fraction) rows."""
    errs = np.sort([t.abs_error_us for t in trials if not t.flagged])
    if not len(errs):
        raise EmptyInputError("no usable trials")
    values, last = np.unique(errs, return_index=False, return_counts=True)
    cum = np.cumsum(last) / len(errs)
    cum[-1] = 1.0
    return [(float(e), float(c)) for e, c in zip(values, cum)]


def cdf_to_csv(rows: Sequence[tuple[float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["error_us", "cum_frac"])
    for e, c in rows:
        w.writerow([f"{e:.6f}", f"{c:.6f}"])
    return buf.getvalue()


def summary(trials: Sequence[SyncTrial]) -> dict:
    errs = np.array([t.abs_error_us for t in trials if not t.flagged])
    return {
        "trials": len(trials),
        "flagged": sum(t.flagged for t in trials),
        "mean_us": float(errs.mean()) if len(errs) else math.nan,
        "max_us": float(errs.max()) if len(errs) else math.nan,
        "p_under_220us": float(np.mean(errs < 220)) if len(errs) else math.nan,
        "p_980_1060us": float(np.mean((errs >= 980) & (errs <= 1060))) if len(errs) else math.nan,
    }


def with_jitter(clock: NodeClock, name: str) -> NodeClock:
    if name not in NAMED_JITTER:
        raise ParameterError(f"unknown jitter preset {name!r}")
    return replace(clock, timestamp_jitter_us=NAMED_JITTER[name])
