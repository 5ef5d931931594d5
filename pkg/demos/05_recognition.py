"""
Event recognition end to end
============================

Train on one synthetic schedule, test on another.  Training samples are
differentials around located events; a boosted-tree classifier labels every
cycle's differential, and voting over a D-cycle window turns the per-cycle
labels into event reports.  Takes about a minute.
"""
import warnings

from loadid.experiment import ExperimentConfig, build, calibrate, fit, score, training_set

warnings.simplefilter("ignore")
cfg = ExperimentConfig()
art = build(cfg)
print("train", len(art.train_trace), "cycles, test", len(art.test_trace), "cycles")

ts = training_set(cfg, art.train_trace)
print("training samples", len(ts), ts.info)

model = fit(cfg, ts)
T = calibrate(cfg, model, art.train_trace, cfg.D)
print("voting thresholds", T.tolist())

rep = score(cfg, model, T, art.test_trace, cfg.D)
print(f"event F1 {rep.average_f1:.4f}  weighted {rep.weighted_f1:.4f}  state F1 {rep.state_f1:.4f}")

# Streaming one cycle at a time gives the same reports
from loadid.pipeline import StreamRecognizer, recognize

stream = StreamRecognizer(model, T, cfg.D).run(art.test_trace.frames())
assert stream == recognize(art.test_trace, model, T, cfg.D)
print(len(stream), "reports; first", stream[0])
