"""Gradient-boosted tree classifier, windowed voting and threshold calibration.

Class labels: appliance ``a`` switching ON is ``2a``, switching OFF is
``2a + 1``, and IDLE (no event) is ``2 * n_appliances``.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from numba import njit

from .errors import DegenerateInputError, FormatError, ParameterError, StateError
from . import metrics


def event_class(appliance: int, on: bool) -> int:
    return 2 * int(appliance) + (0 if on else 1)


def class_event(label: int, n_appliances: int) -> tuple[int, bool] | None:
    """(appliance, is_on) for an event class, None for IDLE."""
    if label == 2 * n_appliances:
        return None
    return label // 2, label % 2 == 0


def idle_class(n_appliances: int) -> int:
    return 2 * n_appliances


# --------------------------------------------------------------------------
# Boosted trees

@dataclass
class TrainConfig:
    n_trees: int = 200
    max_depth: int = 6
    learning_rate: float = 0.1
    seed: int = 0
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    gamma: float = 0.0
    subsample: float = 1.0
    colsample: float = 1.0


@dataclass
class Tree:
    feature: np.ndarray      # int32, -1 marks a leaf
    threshold: np.ndarray    # float64, go left when x <= threshold
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray        # (n_nodes, n_classes) leaf scores

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int32)
        rows = np.arange(len(X))
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return node
            go_left = X[rows, np.where(inner, feat, 0)] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def leaf_of(self, x: Sequence[float]) -> int:
        node = 0
        feature, threshold, left, right = self._lists
        while feature[node] >= 0:
            node = left[node] if x[feature[node]] <= threshold[node] else right[node]
        return node

    @property
    def _lists(self):
        cached = self.__dict__.get("_cache")
        if cached is None:
            cached = (self.feature.tolist(), self.threshold.tolist(), self.left.tolist(), self.right.tolist())
            self.__dict__["_cache"] = cached
        return cached


def _softmax(F: np.ndarray) -> np.ndarray:
    z = F - F.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


@njit(cache=True, fastmath=True)
def _scan_splits(X, order, fidx, G, Hs, Gt, Ht, cols, lam, min_child_weight, gamma):
    """Best exact split per frontier node.

    Walks every candidate feature in presorted order once, accumulating each
    node's left-child gradient sums, and scores the boundary between every
    pair of distinct consecutive values by the reduction in gradient
    variance summed over classes (sample counts in the denominators).  Ties
    keep the first split found: lowest feature, then lowest threshold.
    """
    m, K = Gt.shape
    best_gain = np.zeros(m)
    best_feat = np.full(m, -1, dtype=np.int64)
    best_thr = np.zeros(m)
    GL = np.zeros((m, K))
    nL = np.zeros(m)
    hL = np.zeros(m)
    nT = np.zeros(m)
    parent = np.zeros(m)
    last = np.zeros(m)
    seen = np.zeros(m, dtype=np.bool_)
    n = order.shape[1]
    for i in range(n):
        j = fidx[i]
        if j >= 0:
            nT[j] += 1.0
    for j in range(m):
        s = 0.0
        for k in range(K):
            s += Gt[j, k] * Gt[j, k]
        parent[j] = s / (nT[j] + lam)
    for f in cols:
        GL[:, :] = 0.0
        nL[:] = 0.0
        hL[:] = 0.0
        seen[:] = False
        for r in range(n):
            i = order[f, r]
            j = fidx[i]
            if j < 0:
                continue
            x = X[i, f]
            if seen[j] and x > last[j]:
                hr = Ht[j] - hL[j]
                if hL[j] >= min_child_weight and hr >= min_child_weight:
                    sl = 0.0
                    sr = 0.0
                    for k in range(K):
                        gl = GL[j, k]
                        gr = Gt[j, k] - gl
                        sl += gl * gl
                        sr += gr * gr
                    gain = 0.5 * (sl / (nL[j] + lam) + sr / (nT[j] - nL[j] + lam) - parent[j]) - gamma
                    if gain > best_gain[j]:
                        best_gain[j] = gain
                        best_feat[j] = f
                        mid = 0.5 * (last[j] + x)
                        best_thr[j] = mid if mid < x else last[j]
            for k in range(K):
                GL[j, k] += G[i, k]
            nL[j] += 1.0
            hL[j] += Hs[i]
            last[j] = x
            seen[j] = True
    return best_feat, best_thr


def _grow_tree(X, order, G, H, rows, cols, cfg: TrainConfig) -> Tree:
    """Exact greedy multi-output tree, grown level by level.

    Splits come from :func:`_scan_splits`; leaves take a Newton step per
    class, ``-sum(g) / (sum(h) + lambda)``.
    """
    N, K = G.shape
    lam = cfg.reg_lambda
    Hs = H.sum(axis=1)
    node_of = np.full(N, -1, dtype=np.int64)
    node_of[rows] = 0
    feature, threshold, left, right = [-1], [0.0], [-1], [-1]
    frontier = [0]
    for _ in range(cfg.max_depth):
        if not frontier:
            break
        remap = np.full(len(feature), -1, dtype=np.int64)
        remap[frontier] = np.arange(len(frontier))
        fidx = np.where(node_of >= 0, remap[np.maximum(node_of, 0)], -1)
        act = fidx >= 0
        Gt = np.zeros((len(frontier), K))
        np.add.at(Gt, fidx[act], G[act])
        Ht = np.bincount(fidx[act], weights=Hs[act], minlength=len(frontier))
        best_feat, best_thr = _scan_splits(X, order, fidx, G, Hs, Gt, Ht, cols, lam,
                                           cfg.min_child_weight, cfg.gamma)
        new_frontier = []
        for j, nd in enumerate(frontier):
            f = int(best_feat[j])
            if f < 0:
                continue
            l_id, r_id = len(feature), len(feature) + 1
            feature[nd], threshold[nd], left[nd], right[nd] = f, float(best_thr[j]), l_id, r_id
            feature += [-1, -1]
            threshold += [0.0, 0.0]
            left += [-1, -1]
            right += [-1, -1]
            members = node_of == nd
            go_left = X[:, f] <= best_thr[j]
            node_of[members & go_left] = l_id
            node_of[members & ~go_left] = r_id
            new_frontier += [l_id, r_id]
        frontier = new_frontier

    value = np.zeros((len(feature), K))
    act = node_of >= 0
    g = np.zeros((len(feature), K))
    h = np.zeros((len(feature), K))
    np.add.at(g, node_of[act], G[act])
    np.add.at(h, node_of[act], H[act])
    leaves = np.array(feature) < 0
    value[leaves] = -g[leaves] / (h[leaves] + lam) * cfg.learning_rate
    return Tree(np.array(feature, dtype=np.int32), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int32), np.array(right, dtype=np.int32), value)


class EventClassifier:
    """Multi-class boosted tree ensemble on a softmax objective.

    Each boosting round grows one tree whose leaves hold a score for every
    class; class scores are the base score plus the sum of leaf values.
    """

    def __init__(self, n_classes: int = 37, config: TrainConfig | None = None):
        self.n_classes = n_classes
        self.config = config or TrainConfig()
        self.n_features: int | None = None
        self.base_score: np.ndarray | None = None
        self.trees: list[Tree] = []

    @property
    def trained(self) -> bool:
        return self.base_score is not None

    def fit(self, X, y) -> "EventClassifier":
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
            raise ParameterError("X must be (n_samples, n_features) matching y")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ParameterError(f"labels must lie in [0, {self.n_classes})")
        if len(np.unique(y)) < 2:
            raise DegenerateInputError("training needs at least two classes")
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        N, F = X.shape
        K = self.n_classes
        prior = np.bincount(y, minlength=K) + 1.0
        self.base_score = np.log(prior / prior.sum())
        self.n_features = F
        self.trees = []
        order = np.argsort(X, axis=0, kind="stable").T.copy()
        onehot = np.zeros((N, K))
        onehot[np.arange(N), y] = 1.0
        scores = np.tile(self.base_score, (N, 1))
        for _ in range(cfg.n_trees):
            p = _softmax(scores.copy())
            G = p - onehot
            H = np.maximum(p * (1.0 - p), 1e-6)
            rows = np.arange(N) if cfg.subsample >= 1 else np.sort(
                rng.choice(N, size=max(2, int(cfg.subsample * N)), replace=False))
            cols = np.arange(F) if cfg.colsample >= 1 else np.sort(
                rng.choice(F, size=max(1, int(round(cfg.colsample * F))), replace=False))
            tree = _grow_tree(X, order, G, H, rows, cols, cfg)
            self.trees.append(tree)
            scores += tree.value[tree.apply(X)]
        return self

    def decision_function(self, X) -> np.ndarray:
        if not self.trained:
            raise StateError("model is not trained")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.tile(self.base_score, (len(X), 1))
        for tree in self.trees:
            out += tree.value[tree.apply(X)]
        return out

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def predict_one(self, x) -> int:
        """Single-vector prediction for streaming; matches :meth:`predict`."""
        if not self.trained:
            raise StateError("model is not trained")
        x = np.asarray(x, dtype=np.float64).tolist()
        scores = self.base_score.copy()
        for tree in self.trees:
            scores += tree.value[tree.leaf_of(x)]
        return int(np.argmax(scores))


def train(X, y, config: TrainConfig | None = None, n_classes: int = 37) -> EventClassifier:
    return EventClassifier(n_classes, config).fit(X, y)


def predict(model: EventClassifier, features) -> int:
    return model.predict_one(features)


# --------------------------------------------------------------------------
# Voting

class EventReport(NamedTuple):
    cycle_id: int
    class_label: int
    vote_count: int
    appliance_id: int
    action: str
    fired_at: int


@dataclass
class VoteState:
    """Sliding window of the last D predicted labels with per-class counts."""
    thresholds: np.ndarray
    window_len: int = 30
    idle: int | None = None
    window: deque = field(default_factory=deque)
    counts: np.ndarray | None = None
    refractory_remaining: int = 0

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.int64)
        n = len(self.thresholds)
        if self.idle is None:
            self.idle = n - 1
        if self.counts is None:
            self.counts = np.zeros(n, dtype=np.int64)
        if np.any(self.thresholds < 1):
            raise ParameterError("voting thresholds must be at least 1")

    def clear(self) -> None:
        self.window.clear()
        self.counts[:] = 0


def vote_step(state: VoteState, predicted: int, cycle_id: int) -> EventReport | None:
    """Push one prediction; return a report when some class reaches its threshold.

    After a report the window is emptied and the next D predictions are
    ignored, so one physical event yields one report.
    """
    if state.refractory_remaining > 0:
        state.refractory_remaining -= 1
        return None
    if len(state.window) == state.window_len:
        _, old = state.window.popleft()
        state.counts[old] -= 1
    state.window.append((cycle_id, predicted))
    state.counts[predicted] += 1
    if predicted == state.idle or state.counts[predicted] < state.thresholds[predicted]:
        return None
    eligible = state.counts >= state.thresholds
    eligible[state.idle] = False
    cand = np.flatnonzero(eligible)
    best = int(cand[np.argmax(state.counts[cand])])
    first = next(c for c, lab in state.window if lab == best)
    report = EventReport(first, best, int(state.counts[best]), best // 2,
                         "on" if best % 2 == 0 else "off", cycle_id)
    state.clear()
    state.refractory_remaining = state.window_len
    return report


def vote_stream(predictions: Iterable[int], cycle_ids: Iterable[int], thresholds, window_len: int = 30,
                idle: int | None = None) -> list[EventReport]:
    state = VoteState(np.asarray(thresholds), window_len, idle)
    out = []
    for c, p in zip(cycle_ids, predictions):
        r = vote_step(state, int(p), int(c))
        if r is not None:
            out.append(r)
    return out


def _single_class_reports(positions: np.ndarray, T: int, D: int) -> list[int]:
    """Report cycles for one class voted alone; see :func:`vote_step`."""
    out = []
    n = len(positions)
    if n < T:
        return out
    ok = np.zeros(n, dtype=bool)
    ok[T - 1:] = positions[T - 1:] - positions[:n - T + 1] < D
    start = 0
    while True:
        cand = np.flatnonzero(ok[start + T - 1:])
        if not len(cand):
            return out
        m = start + T - 1 + int(cand[0])
        first = start + int(np.searchsorted(positions[start:m + 1], positions[m] - D, side="right"))
        out.append(int(positions[first]))
        start = int(np.searchsorted(positions, positions[m] + D, side="right"))
        if start >= n:
            return out


def calibrate_thresholds(predictions: np.ndarray, cycle_ids: np.ndarray, truth: Sequence[tuple[int, int]],
                         n_classes: int, window_len: int = 30,
                         tolerance_cycles: int = metrics.DEFAULT_TOLERANCE, margin: int = 0) -> np.ndarray:
    """Per-class voting thresholds maximizing event F1 on a labeled stream.

    ``predictions`` are per-cycle classifier outputs on the training trace and
    ``truth`` its (cycle, class) events.  Each class is voted on its own.
    Ties prefer the larger threshold; classes without truth events get
    ceil(D / 2).  The IDLE threshold is set to D.

    The largest tied threshold sits at the edge of the best-F1 range, where
    one stray prediction on new data loses an event.  ``margin`` steps that
    many values back into the range of equally good thresholds.
    """
    D = window_len
    predictions = np.asarray(predictions)
    cycle_ids = np.asarray(cycle_ids)
    idle = n_classes - 1
    T_out = np.full(n_classes, math.ceil(D / 2), dtype=np.int64)
    T_out[idle] = D
    truth_by_class: dict[int, list[int]] = {}
    for c, k in truth:
        truth_by_class.setdefault(int(k), []).append(int(c))
    missing = []
    for k in range(n_classes - 1):
        if k not in truth_by_class:
            missing.append(k)
            continue
        pos = cycle_ids[predictions == k]
        t_events = [(c, k) for c in truth_by_class[k]]
        scores = np.zeros(D + 1)
        for T in range(D, 0, -1):
            reps = [(c, k) for c in _single_class_reports(pos, T, D)]
            scores[T] = metrics.f1_scores(metrics.match_events(t_events, reps, tolerance_cycles)).per_class[k].f1
        best = np.flatnonzero(scores[1:] == scores[1:].max()) + 1
        top = int(best[-1])
        # stay inside the contiguous run of best thresholds below the top one
        lo = top
        while lo - 1 >= 1 and scores[lo - 1] == scores[top] and top - lo < margin:
            lo -= 1
        T_out[k] = lo
    if missing:
        warnings.warn(f"{len(missing)} classes absent from calibration trace; "
                      f"using threshold {math.ceil(D / 2)}", stacklevel=2)
    return T_out


# --------------------------------------------------------------------------
# HWKM model file

MODEL_MAGIC = b"HWKM"
MODEL_VERSION = (1, 0)
_VERSION = struct.Struct("<HH")
_U32 = struct.Struct("<I")


def model_to_bytes(model: EventClassifier, thresholds=None, extra: dict | None = None) -> bytes:
    if not model.trained:
        raise StateError("model is not trained")
    meta = {
        "n_classes": model.n_classes,
        "n_features": model.n_features,
        "n_trees": len(model.trees),
        "config": asdict(model.config),
        "base_score": model.base_score.tolist(),
        "thresholds": None if thresholds is None else [int(t) for t in thresholds],
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [MODEL_MAGIC, _VERSION.pack(*MODEL_VERSION), _U32.pack(len(blob)), blob]
    for t in model.trees:
        parts.append(_U32.pack(len(t.feature)))
        parts += [t.feature.astype("<i4").tobytes(), t.threshold.astype("<f8").tobytes(),
                  t.left.astype("<i4").tobytes(), t.right.astype("<i4").tobytes(),
                  t.value.astype("<f8").tobytes()]
    return b"".join(parts)


def model_from_bytes(data: bytes):
    """Returns ``(model, thresholds, extra)``."""
    if len(data) < 12 or data[:4] != MODEL_MAGIC:
        raise FormatError("not an HWKM model file")
    major, _minor = _VERSION.unpack_from(data, 4)
    if major != MODEL_VERSION[0]:
        raise FormatError(f"unsupported model version {major}")
    (n_meta,) = _U32.unpack_from(data, 8)
    pos = 12 + n_meta
    if pos > len(data):
        raise FormatError("truncated model file")
    try:
        meta = json.loads(data[12:pos])
        K = int(meta["n_classes"])
        n_trees = int(meta["n_trees"])
        model = EventClassifier(K, TrainConfig(**meta["config"]))
        model.n_features = meta["n_features"]
        model.base_score = np.array(meta["base_score"], dtype=np.float64)
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt model metadata: {exc}") from exc
    view = memoryview(data)
    for _ in range(n_trees):
        if pos + 4 > len(data):
            raise FormatError("truncated model file")
        (n,) = _U32.unpack_from(data, pos)
        pos += 4
        size = n * (4 + 8 + 4 + 4 + 8 * K)
        if pos + size > len(data):
            raise FormatError("truncated model file")
        arrays = []
        for dt, count in (("<i4", n), ("<f8", n), ("<i4", n), ("<i4", n), ("<f8", n * K)):
            nbytes = np.dtype(dt).itemsize * count
            arrays.append(np.frombuffer(view[pos:pos + nbytes], dtype=dt).copy())
            pos += nbytes
        feat, thr, le, ri, val = arrays
        model.trees.append(Tree(feat.astype(np.int32), thr.astype(np.float64), le.astype(np.int32),
                                ri.astype(np.int32), val.reshape(n, K).astype(np.float64)))
    if pos != len(data):
        raise FormatError("trailing bytes after model data")
    thresholds = None if meta.get("thresholds") is None else np.array(meta["thresholds"], dtype=np.int64)
    return model, thresholds, meta.get("extra", {})


def save(model: EventClassifier, thresholds, path, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model, thresholds, extra))


def load(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
