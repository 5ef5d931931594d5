import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from loadid.errors import DegenerateInputError, FormatError, ParameterError, StateError
from loadid.model import (EventClassifier, MODEL_MAGIC, TrainConfig, VoteState, calibrate_thresholds, class_event,
                        event_class, idle_class, load, model_from_bytes, model_to_bytes, predict, save, train,
                        vote_step, vote_stream)

SMALL = TrainConfig(n_trees=20, max_depth=3, learning_rate=0.3)


def blobs(n_classes=3, n=60, seed=0, spread=0.3):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 3, (n_classes, 5))
    y = np.repeat(np.arange(n_classes), n)
    return centers[y] + rng.normal(0, spread, (len(y), 5)), y


def test_class_numbering():
    assert event_class(0, True) == 0 and event_class(0, False) == 1 and event_class(17, False) == 35
    assert idle_class(18) == 36
    assert class_event(5, 18) == (2, False)
    assert class_event(36, 18) is None


def test_separable_two_class():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 4))
    y = (X[:, 2] > 0.1).astype(int)
    m = train(X, y, SMALL, n_classes=2)
    assert (m.predict(X) == y).all()


def test_multiclass_blobs_and_holdout():
    X, y = blobs(4, 80)
    m = train(X, y, SMALL, n_classes=4)
    Xt, yt = blobs(4, 40, seed=0)
    assert (m.predict(X) == y).mean() == 1.0
    assert (m.predict(Xt) == yt).mean() > 0.95
    assert m.decision_function(X[:3]).shape == (3, 4)


def test_contradictory_labels_give_majority_accuracy():
    rng = np.random.default_rng(2)
    X = np.repeat(rng.normal(size=(10, 3)), 10, axis=0)
    y = np.tile(np.array([0] * 7 + [1] * 3), 10)
    m = train(X, y, SMALL, n_classes=2)
    assert (m.predict(X) == y).mean() == pytest.approx(0.7)


def test_degenerate_and_state_errors():
    X, y = blobs(2, 10)
    with pytest.raises(DegenerateInputError):
        train(X, np.zeros(len(X), dtype=int), SMALL, 2)
    with pytest.raises(ParameterError):
        train(X, y + 5, SMALL, 3)
    with pytest.raises(StateError):
        EventClassifier(3).predict(X)
    with pytest.raises(StateError):
        model_to_bytes(EventClassifier(3))


def test_determinism_and_single_prediction():
    X, y = blobs(3, 50, seed=4, spread=1.5)
    cfg = TrainConfig(n_trees=15, max_depth=4, learning_rate=0.3, subsample=0.8, colsample=0.8, seed=7)
    a, b = train(X, y, cfg, 3), train(X, y, cfg, 3)
    assert model_to_bytes(a) == model_to_bytes(b)
    batch = a.predict(X)
    assert [a.predict_one(x) for x in X] == list(batch)
    assert predict(a, X[0]) == batch[0]
    assert predict(a, X[0]) == predict(a, X[0])


def test_ties_go_to_lowest_class():
    m = EventClassifier(3)
    m.n_features = 2
    m.base_score = np.zeros(3)
    m.trees = []
    assert m.predict_one([0.0, 0.0]) == 0


def test_model_file_roundtrip(tmp_path):
    X, y = blobs(3, 40)
    m = train(X, y, SMALL, 3)
    T = np.array([5, 7, 30])
    p = tmp_path / "m.hwkm"
    save(m, T, p, extra={"D": 30})
    back, T2, extra = load(p)
    np.testing.assert_array_equal(T2, T)
    assert extra == {"D": 30}
    probe = np.random.default_rng(0).normal(0, 3, (1000, 5))
    np.testing.assert_array_equal(back.predict(probe), m.predict(probe))
    np.testing.assert_array_equal(back.decision_function(probe), m.decision_function(probe))
    assert model_to_bytes(back, T2, extra) == p.read_bytes()


def test_model_file_corruption():
    X, y = blobs(3, 20)
    data = model_to_bytes(train(X, y, SMALL, 3))
    assert data[:4] == MODEL_MAGIC
    for bad in (data[:-1], data[:20], b"NOPE" + data[4:], data + b"\0",
                data[:4] + (2).to_bytes(2, "little") + data[6:]):
        with pytest.raises(FormatError):
            model_from_bytes(bad)
    # a newer minor version still loads
    model_from_bytes(data[:6] + (9).to_bytes(2, "little") + data[8:])


# --------------------------------------------------------------------------
# voting

IDLE = 4
T4 = np.array([12, 12, 12, 12, 30])


def test_report_fires_on_threshold_push():
    state = VoteState(T4, 30)
    fired = [vote_step(state, 1, c) for c in range(30)]
    hits = [i for i, r in enumerate(fired) if r is not None]
    assert hits == [11]
    r = fired[11]
    assert (r.cycle_id, r.class_label, r.vote_count, r.appliance_id, r.action) == (0, 1, 12, 0, "off")


def test_idle_never_reported():
    assert vote_stream([IDLE] * 200, range(200), T4, 30) == []


def test_tie_prefers_higher_count_then_lower_class():
    T = np.array([2, 2, 2, 2, 30])
    reps = vote_stream([3, 3, 1, 1, 1], range(5), T, 10)
    assert [(r.class_label, r.cycle_id) for r in reps] == [(3, 0)]
    # class 1 reaches its threshold while class 3 has more votes
    T = np.array([3, 3, 3, 2, 30])
    reps = vote_stream([1, 1, 3, 3, 1], range(5), T, 10)
    assert [r.class_label for r in reps] == [3]


def test_refractory_suppresses_duplicates():
    reps = vote_stream([0] * 100, range(100), T4, 30)
    cycles = [r.fired_at for r in reps]
    assert np.all(np.diff(cycles) > 30)


def test_vote_state_rejects_zero_threshold():
    with pytest.raises(ParameterError):
        VoteState(np.array([0, 1, 1]), 5)


def signature_stream(n, start, span, correct, cls, rng):
    """IDLE stream with ``correct`` labels ``cls`` scattered over a signature span."""
    preds = np.full(n, IDLE)
    hits = rng.choice(span, correct, replace=False)
    preds[start + hits] = cls
    return preds


@given(st.integers(5, 50), st.data())
def test_voting_tolerance_bound(D, data):
    t = data.draw(st.integers(0, D - 1))
    T = data.draw(st.integers(1, D - t))
    cls = data.draw(st.integers(0, 3))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    thr = np.array([T] * 4 + [D])
    n = 4 * D
    # up to D - t - T false negatives inside the span still report exactly once
    correct = data.draw(st.integers(T, D - t))
    reps = vote_stream(signature_stream(n, D, D - t, correct, cls, rng), range(n), thr, D)
    assert [r.class_label for r in reps] == [cls]
    # T - 1 false positives anywhere never report
    preds = np.full(n, IDLE)
    preds[rng.choice(n, T - 1, replace=False)] = cls
    assert vote_stream(preds, range(n), thr, D) == []


@given(st.integers(3, 20), st.lists(st.integers(0, 2), min_size=1, max_size=150), st.integers(1, 19))
def test_raising_threshold_never_adds_reports(D, stream, T):
    T = min(T, D - 1)
    # with one active class the count is monotone
    one = [p if p == 0 else IDLE for p in stream]
    lo = vote_stream(one, range(len(one)), np.array([T] * 4 + [D]), D)
    hi = vote_stream(one, range(len(one)), np.array([T + 1] * 4 + [D]), D)
    assert len(hi) <= len(lo)


@given(st.lists(st.integers(0, 4), max_size=200), st.integers(2, 30))
def test_vote_state_counts_consistent(stream, D):
    state = VoteState(np.array([3, 3, 3, 3, D]), D)
    last_report = None
    for c, p in enumerate(stream):
        r = vote_step(state, p, c)
        assert state.counts.sum() == len(state.window) <= D
        assert np.array_equal(state.counts, np.bincount([lab for _, lab in state.window], minlength=5))
        if r is not None:
            assert r.vote_count >= 3
            assert last_report is None or c - last_report > D
            last_report = c


# --------------------------------------------------------------------------
# calibration

def perfect_stream(D, t, events, n):
    preds = np.full(n, IDLE)
    for e, c in events:
        preds[e + t:e + D] = c
    return preds


def test_calibration_perfect_classifier_picks_D_minus_t():
    D, t = 30, 6
    events = [(100, 0), (300, 1), (500, 2), (700, 3), (900, 0)]
    preds = perfect_stream(D, t, events, 1100)
    T = calibrate_thresholds(preds, np.arange(1100), events, 5, D)
    np.testing.assert_array_equal(T, [D - t] * 4 + [D])


def test_calibration_removes_isolated_false_positives():
    D, t = 30, 6
    events = [(100, 0), (300, 1), (500, 2), (700, 3), (900, 0)]
    preds = perfect_stream(D, t, events, 1100)
    preds[[50, 200, 400, 600, 1050]] = 0
    T = calibrate_thresholds(preds, np.arange(1100), events, 5, D)
    assert T[0] >= 2
    reps = vote_stream(preds, range(1100), T, D)
    assert sorted((r.cycle_id, r.class_label) for r in reps) == [(e + t, c) for e, c in events]


def test_calibration_absent_class_defaults():
    D = 30
    events = [(100, 0)]
    preds = perfect_stream(D, 0, events, 300)
    with pytest.warns(UserWarning):
        T = calibrate_thresholds(preds, np.arange(300), events, 5, D)
    assert list(T[1:4]) == [math.ceil(D / 2)] * 3
    assert T[4] == D


def test_calibration_margin_backs_off_inside_best_range():
    D, t = 30, 6
    events = [(100, 0), (300, 1), (500, 2), (700, 3)]
    preds = perfect_stream(D, t, events, 900)
    T = calibrate_thresholds(preds, np.arange(900), events, 5, D, margin=3)
    np.testing.assert_array_equal(T[:4], [D - t - 3] * 4)
    # the margin never leaves the best range
    T = calibrate_thresholds(preds, np.arange(900), events, 5, D, margin=100)
    np.testing.assert_array_equal(T[:4], [1] * 4)
