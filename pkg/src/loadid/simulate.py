"""Synthetic appliance currents and labeled aggregate traces.

Waveforms are built per mains cycle.  Cycle ``c`` covers samples
``c * cycle_len ... (c + 1) * cycle_len - 1`` and starts at an upward
voltage zero crossing, so every array below is shaped ``(n_cycles, cycle_len)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import FormatError, ParameterError
from .schedule import Action, EventSchedule

# wideband noise added during transients, relative to the fundamental amplitude
TRANSIENT_NOISE_REL = 0.1


@dataclass(frozen=True)
class Surge:
    peak_multiple: float = 3.0
    decay_per_cycle: float = 0.5

    def envelope(self, k: np.ndarray | int, n_cycles: int) -> np.ndarray:
        return 1.0 + (self.peak_multiple - 1.0) * self.decay_per_cycle ** np.asarray(k, dtype=float)

    def to_dict(self):
        return {"kind": "surge", "peak_multiple": self.peak_multiple, "decay_per_cycle": self.decay_per_cycle}


@dataclass(frozen=True)
class Ramp:
    def envelope(self, k: np.ndarray | int, n_cycles: int) -> np.ndarray:
        return np.asarray(k, dtype=float) / max(n_cycles, 1)

    def to_dict(self):
        return {"kind": "ramp"}


def _shape_from_dict(d: Mapping) -> Surge | Ramp:
    kind = d.get("kind")
    if kind == "surge":
        peak, decay = float(d["peak_multiple"]), float(d["decay_per_cycle"])
        if peak < 1 or not 0 < decay < 1:
            raise ParameterError(f"invalid surge shape {dict(d)}")
        return Surge(peak, decay)
    if kind == "ramp":
        return Ramp()
    raise ParameterError(f"unknown transient shape {kind!r}")


@dataclass
class ApplianceSpec:
    id: int
    name: str
    rated_power_w: float
    harmonics: list[tuple[int, float, float]]
    power_jitter_rel: float = 0.0
    transient_cycles: int = 0
    transient_shape: Surge | Ramp = field(default_factory=Ramp)
    off_leakage_a: float = 0.0

    def __post_init__(self):
        self.harmonics = [(int(k), float(a), float(p)) for k, a, p in self.harmonics]
        if self.rated_power_w <= 0:
            raise ParameterError(f"{self.name}: rated power must be positive")
        if not any(k == 1 and a > 0 for k, a, _ in self.harmonics):
            raise ParameterError(f"{self.name}: needs a positive fundamental")
        if any(k < 1 for k, _, _ in self.harmonics):
            raise ParameterError(f"{self.name}: harmonic orders start at 1")
        if self.power_jitter_rel < 0 or self.off_leakage_a < 0 or self.transient_cycles < 0:
            raise ParameterError(f"{self.name}: negative jitter, leakage or transient length")

    @classmethod
    def from_power(cls, id, name, rated_power_w, shape, voltage_rms_v=220.0, **kw):
        """Scale a relative harmonic shape so mean(v*i) equals ``rated_power_w``.

        ``shape`` is a list of (order, relative amplitude, phase); the
        fundamental's relative amplitude is taken as 1.
        """
        phase1 = next(p for k, _, p in shape if k == 1)
        a1 = 2.0 * rated_power_w / (voltage_rms_v * np.sqrt(2.0) * np.cos(phase1))
        harmonics = [(k, round(a1 * (1.0 if k == 1 else r), 9), p) for k, r, p in shape]
        return cls(id, name, rated_power_w, harmonics, **kw)

    @property
    def fundamental_amplitude(self) -> float:
        return sum(a for k, a, _ in self.harmonics if k == 1)

    def steady_waveform(self, cycle_len: int) -> np.ndarray:
        theta = 2 * np.pi * np.arange(cycle_len) / cycle_len
        out = np.zeros(cycle_len)
        for k, amp, phase in self.harmonics:
            out += amp * np.sin(k * theta + phase)
        return out

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "rated_power_w": self.rated_power_w,
            "harmonics": [list(h) for h in self.harmonics],
            "power_jitter_rel": self.power_jitter_rel,
            "transient_cycles": self.transient_cycles,
            "transient_shape": self.transient_shape.to_dict(),
            "off_leakage_a": self.off_leakage_a,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ApplianceSpec":
        return cls(
            id=int(d["id"]),
            name=str(d["name"]),
            rated_power_w=float(d["rated_power_w"]),
            harmonics=[tuple(h) for h in d["harmonics"]],
            power_jitter_rel=float(d.get("power_jitter_rel", 0.0)),
            transient_cycles=int(d.get("transient_cycles", 0)),
            transient_shape=_shape_from_dict(d.get("transient_shape", {"kind": "ramp"})),
            off_leakage_a=float(d.get("off_leakage_a", 0.0)),
        )


@dataclass
class GridSpec:
    mains_hz: float = 50.0
    sample_rate_hz: float = 16000.0
    voltage_rms_v: float = 220.0
    voltage_jitter_rel: float = 0.0
    noise_mean_a: float = 0.0
    noise_std_a: float = 0.01

    @property
    def cycle_len(self) -> int:
        return int(round(self.sample_rate_hz / self.mains_hz))

    @property
    def voltage_peak(self) -> float:
        return self.voltage_rms_v * np.sqrt(2.0)

    def to_dict(self) -> dict:
        return {
            "mains_hz": self.mains_hz,
            "sample_rate_hz": self.sample_rate_hz,
            "voltage_rms_v": self.voltage_rms_v,
            "voltage_jitter_rel": self.voltage_jitter_rel,
            "background_noise_a": {"mean": self.noise_mean_a, "std": self.noise_std_a},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridSpec":
        noise = d.get("background_noise_a", {})
        return cls(
            mains_hz=float(d.get("mains_hz", 50.0)),
            sample_rate_hz=float(d.get("sample_rate_hz", 16000.0)),
            voltage_rms_v=float(d.get("voltage_rms_v", 220.0)),
            voltage_jitter_rel=float(d.get("voltage_jitter_rel", 0.0)),
            noise_mean_a=float(noise.get("mean", 0.0)),
            noise_std_a=float(noise.get("std", 0.01)),
        )


@dataclass(frozen=True)
class Transient:
    k_since_switch: int
    rising: bool = True


OFF = "off"
ON = "on"


@dataclass
class CycleFrame:
    cycle_id: int
    voltage: np.ndarray
    aggregate_current: np.ndarray
    label: int
    per_appliance_current: np.ndarray | None = None


@dataclass
class Trace:
    grid: GridSpec
    appliances: list[ApplianceSpec]
    voltage: np.ndarray
    aggregate: np.ndarray
    labels: np.ndarray
    individual: np.ndarray | None = None
    first_cycle: int = 0
    n_appliances: int | None = None
    # (n_cycles, n_appliances) RMS of each appliance's own current, if known
    individual_rms: np.ndarray | None = None

    def __post_init__(self):
        if self.n_appliances is None:
            self.n_appliances = len(self.appliances)
        if self.individual_rms is None and self.individual is not None:
            self.individual_rms = np.sqrt(np.mean(np.square(self.individual), axis=-1))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def cycle_ids(self) -> np.ndarray:
        return np.arange(self.first_cycle, self.first_cycle + len(self), dtype=np.int64)

    def frame(self, i: int) -> CycleFrame:
        ind = None if self.individual is None else self.individual[i]
        return CycleFrame(self.first_cycle + i, self.voltage[i], self.aggregate[i], int(self.labels[i]), ind)

    def frames(self) -> Iterator[CycleFrame]:
        for i in range(len(self)):
            yield self.frame(i)

    def label_bits(self) -> np.ndarray:
        """(n_cycles, n_appliances) boolean ON matrix."""
        shifts = np.arange(self.n_appliances, dtype=np.uint32)
        return (self.labels[:, None] >> shifts & 1).astype(bool)

    def events(self) -> list[tuple[int, int, Action]]:
        """(cycle_id, appliance, action) for every label change."""
        bits = self.label_bits()
        out = []
        changes = np.nonzero(np.diff(bits.astype(np.int8), axis=0))
        for i, a in sorted(zip(*changes)):
            action = Action.ON if bits[i + 1, a] else Action.OFF
            out.append((self.first_cycle + int(i) + 1, int(a), action))
        return out

    @property
    def duration_hours(self) -> float:
        return len(self) / self.grid.mains_hz / 3600.0


# --------------------------------------------------------------------------
# Synthesis

def synth_appliance_cycle(spec: ApplianceSpec, state, rng: np.random.Generator,
                          cycle_len: int = 320) -> np.ndarray:
    """One cycle of an appliance's current in the given state.

    ``state`` is ``"off"``, ``"on"`` or a :class:`Transient`.  Transients after
    switch-on scale the steady waveform by the appliance's envelope; transients
    after switch-off ramp it down linearly.  Both add wideband noise.
    """
    if state == OFF:
        if spec.off_leakage_a == 0:
            return np.zeros(cycle_len)
        return rng.normal(0.0, spec.off_leakage_a, cycle_len)
    wave = spec.steady_waveform(cycle_len)
    scale = 1.0 + spec.power_jitter_rel * rng.standard_normal() if spec.power_jitter_rel else 1.0
    if state == ON:
        return scale * wave
    env = _transient_envelope(spec, np.array([state.k_since_switch]), state.rising)[0]
    noise = rng.normal(0.0, TRANSIENT_NOISE_REL * spec.fundamental_amplitude, cycle_len)
    return scale * env * wave + noise


def _transient_envelope(spec: ApplianceSpec, k: np.ndarray, rising: bool) -> np.ndarray:
    if rising:
        return spec.transient_shape.envelope(k, spec.transient_cycles)
    return 1.0 - (k + 1.0) / (spec.transient_cycles + 1.0)


def _appliance_timeline(events: Sequence[tuple[int, Action]], n_cycles: int):
    """Per-cycle (on, transient index, rising) arrays for one appliance."""
    on = np.zeros(n_cycles, dtype=bool)
    since = np.full(n_cycles, -1, dtype=np.int64)
    rising = np.zeros(n_cycles, dtype=bool)
    for i, (t, action) in enumerate(events):
        end = events[i + 1][0] if i + 1 < len(events) else n_cycles
        on[t:end] = action is Action.ON
        since[t:end] = np.arange(end - t)
        rising[t:end] = action is Action.ON
    return on, since, rising


def execute_schedule(schedule: EventSchedule, specs: Sequence[ApplianceSpec], grid: GridSpec,
                     seed: int = 0, n_cycles: int | None = None, keep_individual: bool = False,
                     dtype=np.float64) -> Trace:
    """Run a schedule on simulated appliances and record the aggregate current.

    Every appliance draws from its own child random stream, so the result does
    not depend on synthesis order.
    """
    if schedule.n_appliances != len(specs):
        raise ParameterError(f"schedule has {schedule.n_appliances} appliances, catalog has {len(specs)}")
    if n_cycles is None:
        n_cycles = schedule.horizon
    if schedule.events and schedule.events[-1].time_cycle >= n_cycles:
        raise ParameterError("schedule events extend beyond the trace horizon")
    L = grid.cycle_len
    root = np.random.SeedSequence(seed)
    grid_ss, *app_ss = root.spawn(len(specs) + 1)
    grid_rng = np.random.default_rng(grid_ss)

    theta = 2 * np.pi * np.arange(L) / L
    vscale = 1.0 + grid.voltage_jitter_rel * grid_rng.standard_normal(n_cycles)
    voltage = (grid.voltage_peak * vscale)[:, None] * np.sin(theta)[None, :]
    aggregate = grid_rng.normal(grid.noise_mean_a, grid.noise_std_a, (n_cycles, L)) \
        if grid.noise_std_a > 0 else np.full((n_cycles, L), grid.noise_mean_a)

    individual = np.zeros((n_cycles, len(specs), L), dtype=dtype) if keep_individual else None
    labels = np.zeros(n_cycles, dtype=np.uint32)
    ind_rms = np.zeros((n_cycles, len(specs)))
    per_app = {i: [] for i in range(len(specs))}
    for ev in schedule.events:
        per_app[ev.appliance_id].append((ev.time_cycle, ev.action))

    for i, spec in enumerate(specs):
        rng = np.random.default_rng(app_ss[i])
        on, since, rising = _appliance_timeline(per_app[i], n_cycles)
        labels |= on.astype(np.uint32) << np.uint32(i)
        in_transient = (since >= 0) & (since < spec.transient_cycles)
        jitter = rng.standard_normal(n_cycles)
        scale = np.where(on, 1.0 + spec.power_jitter_rel * jitter, 0.0)
        env = np.ones(n_cycles)
        if in_transient.any():
            k = since[in_transient]
            up = rising[in_transient]
            env_t = np.where(up, spec.transient_shape.envelope(k, spec.transient_cycles),
                             1.0 - (k + 1.0) / (spec.transient_cycles + 1.0))
            env[in_transient] = env_t
            # switch-off transients carry the fading ON waveform
            scale[in_transient & ~rising] = 1.0 + spec.power_jitter_rel * jitter[in_transient & ~rising]
        scale = scale * env
        current = scale[:, None] * spec.steady_waveform(L)[None, :]
        noise_std = np.zeros(n_cycles)
        if spec.off_leakage_a > 0:
            noise_std[~on & ~in_transient] = spec.off_leakage_a
        noise_std[in_transient] = TRANSIENT_NOISE_REL * spec.fundamental_amplitude
        noisy = noise_std > 0
        if noisy.any():
            current[noisy] += noise_std[noisy, None] * rng.standard_normal((int(noisy.sum()), L))
        aggregate += current
        ind_rms[:, i] = np.sqrt(np.mean(np.square(current), axis=1))
        if keep_individual:
            individual[:, i, :] = current

    return Trace(grid, list(specs), voltage.astype(dtype, copy=False), aggregate.astype(dtype, copy=False),
                 labels, individual, 0, len(specs), ind_rms)


def resample_imbalanced(trace_events: Sequence, target_distribution: Mapping[int, float],
                        seed: int = 0, appliance_of=None) -> list:
    """Redraw events so per-appliance shares follow ``target_distribution``.

    The total count is kept.  Appliances asked for more events than they have
    are drawn with replacement.  ``appliance_of`` maps an event to its
    appliance id; by default events are ``(cycle, class_label)`` pairs with
    ``appliance = class_label // 2``.
    """
    if appliance_of is None:
        appliance_of = lambda ev: int(ev[1]) // 2  # noqa: E731
    weights = {int(a): float(w) for a, w in target_distribution.items()}
    if any(w < 0 for w in weights.values()):
        raise ParameterError("weights must be non-negative")
    if sum(weights.values()) <= 0:
        raise ParameterError("weights sum to zero")
    rng = np.random.default_rng(seed)
    pools: dict[int, list[int]] = {}
    for idx, ev in enumerate(trace_events):
        pools.setdefault(appliance_of(ev), []).append(idx)
    # drop appliances that have no events to draw from
    apps = sorted(a for a in weights if weights[a] > 0 and a in pools)
    if not apps:
        raise ParameterError("no weighted appliance has events")
    total = len(trace_events)
    w = np.array([weights[a] for a in apps])
    quota = w / w.sum() * total
    counts = np.floor(quota).astype(int)
    rest = total - counts.sum()
    counts[np.argsort(-(quota - counts), kind="stable")[:rest]] += 1

    chosen = []
    for a, c in zip(apps, counts):
        pool = pools[a]
        if c <= len(pool):
            picks = rng.choice(len(pool), size=c, replace=False)
        else:
            picks = np.concatenate([rng.permutation(len(pool)), rng.choice(len(pool), size=c - len(pool))])
        chosen += [pool[p] for p in picks]
    chosen.sort()
    return [trace_events[i] for i in chosen]


# --------------------------------------------------------------------------
# Catalog

def load_catalog(path=None) -> list[ApplianceSpec]:
    if path is None:
        text = resources.files("loadid.data").joinpath("catalog.json").read_text(encoding="utf-8")
    else:
        with open(path, "rb") as fh:
            text = fh.read()
    try:
        doc = json.loads(text)
        records = doc["appliances"] if isinstance(doc, dict) else doc
        return [ApplianceSpec.from_dict(r) for r in records]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed appliance catalog: {exc}") from exc


def save_catalog(specs: Sequence[ApplianceSpec], path, note: str = "") -> None:
    doc = {"format": "loadid-appliance-catalog", "version": 1, "synthetic": True, "note": note,
           "appliances": [s.to_dict() for s in specs]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


# relative harmonic shapes: (order, amplitude relative to fundamental, phase)
_RESISTIVE = [(1, 1.0, 0.0), (3, 0.01, 0.0)]
_SMPS_A = [(1, 1.0, 0.25), (3, 0.85, 3.3), (5, 0.62, 0.4), (7, 0.38, 3.6), (9, 0.18, 0.7)]
_SMPS_B = [(1, 1.0, 0.15), (3, 0.55, 3.0), (5, 0.25, 6.0), (7, 0.1, 2.8)]
_SMPS_C = [(1, 1.0, 0.35), (3, 0.9, 3.5), (5, 0.75, 0.9), (7, 0.55, 4.3), (9, 0.35, 1.6), (11, 0.2, 5.0)]
_PFC = [(1, 1.0, 0.05), (3, 0.12, 0.5), (5, 0.06, 2.0)]
_LED_A = [(1, 1.0, 0.55), (3, 0.45, 2.2), (5, 0.3, 4.4)]
_LED_B = [(1, 1.0, 0.45), (3, 0.7, 4.0), (5, 0.2, 1.0), (7, 0.15, 5.0)]
_BALLAST = [(1, 1.0, -0.9), (3, 0.18, -2.5), (5, 0.05, 1.0)]
_MOTOR = [(1, 1.0, -0.65), (3, 0.12, -1.0), (5, 0.04, 2.5)]
_UNIVERSAL = [(1, 1.0, -0.35), (3, 0.22, 1.2), (5, 0.1, -2.0), (7, 0.05, 0.5)]
_MICROWAVE = [(1, 1.0, -0.4), (2, 0.18, 1.0), (3, 0.3, -0.8), (5, 0.08, 2.2)]
_INDUCTION = [(1, 1.0, 0.1), (3, 0.2, 3.0), (5, 0.1, 0.2), (7, 0.06, 2.5)]
_ULTRASONIC = [(1, 1.0, 0.3), (2, 0.05, 0.0), (3, 0.65, 3.9), (5, 0.45, 1.3), (7, 0.2, 4.9)]
_CHARGER = [(1, 1.0, 0.6), (3, 0.9, 3.6), (5, 0.8, 0.8), (7, 0.65, 4.2), (9, 0.45, 1.3)]


def build_default_catalog(voltage_rms_v: float = 220.0) -> list[ApplianceSpec]:
    """Eighteen synthetic appliances spanning roughly 5 W to 2160 W."""
    rows = [
        ("Monitor", 25, _SMPS_A, 0.01, 6, Ramp()),
        ("SmartScreen", 60, _SMPS_B, 0.01, 8, Ramp()),
        ("Humidifier", 40, _ULTRASONIC, 0.01, 4, Ramp()),
        ("FluorescentLamp", 36, _BALLAST, 0.008, 10, Surge(2.0, 0.7)),
        ("LEDLamp24w", 24, _LED_A, 0.008, 3, Ramp()),
        ("Television", 90, _SMPS_C, 0.01, 8, Ramp()),
        ("IncandescentBulb", 100, _RESISTIVE, 0.002, 6, Surge(8.0, 0.5)),
        ("Washer", 400, _MOTOR, 0.002, 15, Surge(3.0, 0.8)),
        ("ElectricCooker", 700, _RESISTIVE, 0.0005, 2, Ramp()),
        ("MicrowaveOven", 1150, _MICROWAVE, 0.0008, 12, Ramp()),
        ("InductionCooker", 1800, _INDUCTION, 0.0005, 10, Ramp()),
        ("AirHeater", 2160, _RESISTIVE, 0.0004, 4, Surge(1.3, 0.5)),
        ("LEDLamp36w", 36, _LED_B, 0.008, 3, Ramp()),
        ("ElectricKettle", 1500, _RESISTIVE, 0.0004, 2, Ramp()),
        ("Stirrer", 250, _UNIVERSAL, 0.003, 8, Surge(2.0, 0.6)),
        ("PhoneCharger", 5, _CHARGER, 0.01, 3, Ramp()),
        ("Desktop", 120, _PFC, 0.005, 8, Ramp()),
        ("SweepingRobot", 30, _SMPS_B[:1] + [(3, 0.3, 1.5), (5, 0.5, 3.9)], 0.01, 5, Ramp()),
    ]
    return [
        ApplianceSpec.from_power(i, name, power, shape, voltage_rms_v, power_jitter_rel=jit,
                                 transient_cycles=t, transient_shape=tshape)
        for i, (name, power, shape, jit, t, tshape) in enumerate(rows)
    ]


# --------------------------------------------------------------------------
# HWK1 trace file

TRACE_MAGIC = b"HWK1"
TRACE_VERSION = 1
_HEADER = struct.Struct("<IdIIB")


def _frame_dtype(cycle_len: int, n_appliances: int, has_individual: bool) -> np.dtype:
    fields = [("cycle_id", "<u8"), ("label", "<u4"),
              ("voltage", "<f4", (cycle_len,)), ("aggregate", "<f4", (cycle_len,))]
    if has_individual:
        fields.append(("individual", "<f4", (n_appliances, cycle_len)))
    return np.dtype(fields)


def trace_to_bytes(trace: Trace) -> bytes:
    L = trace.grid.cycle_len
    n = trace.n_appliances
    has_ind = trace.individual is not None
    rec = np.zeros(len(trace), dtype=_frame_dtype(L, n, has_ind))
    rec["cycle_id"] = trace.cycle_ids
    rec["label"] = trace.labels
    rec["voltage"] = trace.voltage
    rec["aggregate"] = trace.aggregate
    if has_ind:
        rec["individual"] = trace.individual
    header = TRACE_MAGIC + _HEADER.pack(TRACE_VERSION, float(trace.grid.sample_rate_hz), L, n, int(has_ind))
    return header + rec.tobytes()


def trace_from_bytes(data: bytes, appliances: Sequence[ApplianceSpec] | None = None) -> Trace:
    """Parse an HWK1 file; arrays keep the file's float32 precision."""
    if len(data) < 4 + _HEADER.size or data[:4] != TRACE_MAGIC:
        raise FormatError("not an HWK1 trace file")
    version, sample_rate, L, n, has_ind = _HEADER.unpack_from(data, 4)
    if version != TRACE_VERSION:
        raise FormatError(f"unsupported trace version {version}")
    if has_ind not in (0, 1) or L == 0:
        raise FormatError("corrupt trace header")
    dt = _frame_dtype(L, n, bool(has_ind))
    body = data[4 + _HEADER.size:]
    if len(body) % dt.itemsize:
        raise FormatError("truncated trace file")
    rec = np.frombuffer(body, dtype=dt)
    ids = rec["cycle_id"].astype(np.int64)
    first = int(ids[0]) if len(ids) else 0
    if len(ids) and np.any(ids != np.arange(first, first + len(ids))):
        raise FormatError("trace cycle ids are not consecutive")
    grid = GridSpec(mains_hz=sample_rate / L, sample_rate_hz=sample_rate)
    return Trace(
        grid,
        list(appliances) if appliances is not None else [],
        rec["voltage"].copy(),
        rec["aggregate"].copy(),
        rec["label"].copy(),
        rec["individual"].copy() if has_ind else None,
        first,
        n,
    )


def save_trace(trace: Trace, path) -> None:
    with open(path, "wb") as fh:
        fh.write(trace_to_bytes(trace))


def load_trace(path, appliances=None) -> Trace:
    with open(path, "rb") as fh:
        return trace_from_bytes(fh.read(), appliances)
