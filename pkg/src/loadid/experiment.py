"""End-to-end experiments on synthetic traces.

One configuration object carries everything a run needs: the two schedules
(train and held-out test), the grid, the catalog, pipeline and classifier
settings and all seeds.  The classifier's training samples do not depend on
the differential interval, so one model serves a whole interval sweep; only
threshold calibration and inference are repeated per interval.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import metrics
from .errors import ParameterError
from .model import EventClassifier, TrainConfig, calibrate_thresholds, event_class, train
from .pipeline import (DEFAULT_D, MIN_SIMILARITY, TrainingSet, cycle_predictions, locate_obvious_events,
                       prepare_training_set)
from .schedule import EventSchedule, ScheduleParams, generate_schedule
from .simulate import GridSpec, Trace, execute_schedule, load_catalog, resample_imbalanced


def skewed_weights(n_appliances: int, ratio: float = 0.7) -> dict[int, float]:
    """Geometric per-appliance shares: appliance a gets weight ratio**a."""
    return {a: ratio ** a for a in range(n_appliances)}


@dataclass
class ExperimentConfig:
    catalog_path: str | None = None
    grid: GridSpec = field(default_factory=GridSpec)
    train_schedule: ScheduleParams = field(
        default_factory=lambda: ScheduleParams(18, 6, 3, rounds=3, dwell_cycles=100, rng_seed=1))
    test_schedule: ScheduleParams = field(
        default_factory=lambda: ScheduleParams(18, 6, 3, rounds=2, dwell_cycles=100, rng_seed=7))
    train_trace_seed: int = 1
    test_trace_seed: int = 7
    D: int = DEFAULT_D
    n_side: int = 4
    idle_share: float = 1.0
    min_similarity: float = MIN_SIMILARITY
    sample_seed: int = 0
    model: TrainConfig = field(default_factory=lambda: TrainConfig(n_trees=40, max_depth=6, learning_rate=0.3))
    tolerance_cycles: int = metrics.DEFAULT_TOLERANCE
    threshold_margin: int = 3
    imbalance_ratio: float = 0.7
    imbalance_seed: int = 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "grid" in kw:
            kw["grid"] = GridSpec.from_dict(kw["grid"])
        for key in ("train_schedule", "test_schedule"):
            if key in kw:
                kw[key] = ScheduleParams(**kw[key])
        if "model" in kw:
            kw["model"] = TrainConfig(**kw["model"])
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


def truth_events(trace: Trace) -> list[tuple[int, int]]:
    return [(c, event_class(a, act.value == "on")) for c, a, act in trace.events()]


@dataclass
class Artifacts:
    catalog: list
    train_schedule: EventSchedule
    test_schedule: EventSchedule
    train_trace: Trace
    test_trace: Trace


def build(cfg: ExperimentConfig) -> Artifacts:
    catalog = load_catalog(cfg.catalog_path)
    s_train = generate_schedule(cfg.train_schedule)
    s_test = generate_schedule(cfg.test_schedule)
    tr = execute_schedule(s_train, catalog, cfg.grid, seed=cfg.train_trace_seed, dtype=np.float32)
    te = execute_schedule(s_test, catalog, cfg.grid, seed=cfg.test_trace_seed, dtype=np.float32)
    return Artifacts(catalog, s_train, s_test, tr, te)


def training_set(cfg: ExperimentConfig, trace: Trace, imbalanced: bool = False) -> TrainingSet:
    events = locate_obvious_events(trace, D=cfg.D)
    if imbalanced:
        events = resample_imbalanced(events, skewed_weights(trace.n_appliances, cfg.imbalance_ratio),
                                     seed=cfg.imbalance_seed)
    return prepare_training_set(trace, events, n_side=cfg.n_side, idle_share=cfg.idle_share,
                                min_similarity=cfg.min_similarity, seed=cfg.sample_seed)


def fit(cfg: ExperimentConfig, ts: TrainingSet) -> EventClassifier:
    return train(ts.features, ts.labels, cfg.model, 2 * ts.n_appliances + 1)


def calibrate(cfg: ExperimentConfig, model: EventClassifier, trace: Trace, D: int) -> np.ndarray:
    ids, pred = cycle_predictions(trace, model, D)
    return calibrate_thresholds(pred, ids, truth_events(trace), model.n_classes, D, cfg.tolerance_cycles,
                                cfg.threshold_margin)


def score(cfg: ExperimentConfig, model: EventClassifier, thresholds, trace: Trace, D: int) -> metrics.MetricReport:
    """Event and state scores of the recognizer on a labeled trace."""
    from .pipeline import recognize

    reports = recognize(trace, model, thresholds, D)
    predicted = [(r.cycle_id, r.class_label) for r in reports]
    rep = metrics.event_report(truth_events(trace), predicted, cfg.tolerance_cycles,
                               classes=range(model.n_classes - 1))
    est = metrics.states_from_reports(predicted, int(trace.labels[0]), len(trace), trace.n_appliances,
                                      trace.first_cycle)
    rep.state_f1 = float(metrics.state_f1(est, trace.label_bits()).mean())
    rep.extra = {"D": D, "reports": len(reports)}
    return rep


def run_end_to_end(cfg: ExperimentConfig, art: Artifacts | None = None, imbalanced: bool = True) -> dict:
    """Balanced run and, optionally, the imbalanced-training variant."""
    art = art or build(cfg)
    out = {}
    variants = [("balanced", False)] + ([("imbalanced", True)] if imbalanced else [])
    for name, skew in variants:
        model = fit(cfg, training_set(cfg, art.train_trace, skew))
        T = calibrate(cfg, model, art.train_trace, cfg.D)
        rep = score(cfg, model, T, art.test_trace, cfg.D)
        out[name] = {"average_f1": rep.average_f1, "weighted_f1": rep.weighted_f1, "state_f1": rep.state_f1,
                     "thresholds": T.tolist()}
    return out


def run_interval_sweep(cfg: ExperimentConfig, intervals: Sequence[int] = (10, 20, 30, 40, 50),
                       art: Artifacts | None = None, model: EventClassifier | None = None) -> list[dict]:
    """Event F1 for each differential interval with one shared classifier."""
    art = art or build(cfg)
    if model is None:
        model = fit(cfg, training_set(cfg, art.train_trace))
    rows = []
    for D in intervals:
        T = calibrate(cfg, model, art.train_trace, D)
        rep = score(cfg, model, T, art.test_trace, D)
        rows.append({"D": int(D), "average_f1": rep.average_f1, "weighted_f1": rep.weighted_f1,
                     "state_f1": rep.state_f1})
    return rows
