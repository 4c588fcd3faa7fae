# Learning a bark filter bank with a gated hidden layer
#
# The model maps a 257-bin magnitude spectrum to 32 filter outputs through a
# 64-unit dynamic layer. Phase 1 trains weights only. Phase 2 adds a capacity
# penalty that closes units, and a short settle phase fixes the final shape.
# Takes about 10 seconds. Run: python3 demos/02_filterbank_training.py

from dyncap.experiments import ExperimentConfig, train_filterbank
from dyncap.profiler import profile
from dyncap.rng import RngStream

config = ExperimentConfig()
penalized = train_filterbank(config, 64, 0.06, RngStream(0))
control = train_filterbank(config, 64, 0.0, RngStream(0))

print(f"{'':12}{'units':>6}{'eval L1':>10}")
print(f"{'control':12}{control.out_width:6d}{control.final_l1:10.4f}")
print(f"{'penalized':12}{penalized.out_width:6d}{penalized.final_l1:10.4f}")

# Training history: task loss, mean gate value, open units and effective cost.
h = penalized.history
for step in range(0, len(h), 500):
    print(f"step {h.step[step]:5d}  L1 {h.task_loss[step]:.3f}  mean lambda {h.mean_lambda[step]:.3f}  "
          f"active {h.active_units[step]:2d}  FLOPs {h.flops_per_frame[step]:.0f}")

before = profile(penalized.model).flops_per_frame
after = profile(penalized.consolidated).flops_per_frame
print(f"\nFLOPs per frame: {before} -> {after} ({1 - after / before:.1%} saved)")
