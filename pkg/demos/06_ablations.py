"""
Differential interval and training balance
==========================================

The interval D must outlast switching transients, otherwise differentials
still carry the transient when the vote is taken.  Training on a skewed
event mix costs accuracy on the rare appliances.  Takes a couple of minutes.
"""
import warnings

from loadid.experiment import ExperimentConfig, build, run_end_to_end, run_interval_sweep

warnings.simplefilter("ignore")
cfg = ExperimentConfig()
art = build(cfg)
print("longest transient", max(s.transient_cycles for s in art.catalog), "cycles")

for row in run_interval_sweep(cfg, (10, 20, 30, 40, 50), art):
    print(f"D={row['D']:2d}  event F1 {row['average_f1']:.4f}  state F1 {row['state_f1']:.4f}")

for name, r in run_end_to_end(cfg, art).items():
    print(f"{name:10s} event F1 {r['average_f1']:.4f}")
