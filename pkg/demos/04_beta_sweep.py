# How the penalty weight sets the final width
#
# A reduced sweep: two penalty weights, three starting widths, shorter training.
# Stronger penalties leave fewer units, and no run ever ends wider than it began.
# The full grid is `dyncap run --experiment beta_sweep` (a few minutes).
# Run: python3 demos/04_beta_sweep.py   (about a minute)

import tempfile
from pathlib import Path

from dyncap.experiments import ExperimentConfig, run_beta_sweep

with tempfile.TemporaryDirectory() as tmp:
    config = ExperimentConfig(experiment="beta_sweep", out_dir=str(Path(tmp) / "sweep"),
                              beta_list=(0.01, 0.5), overparam_list=(2.0, 4.0, 6.0),
                              total_steps=1500, phase1_steps=500)
    art = run_beta_sweep(config)
    print(art["sweep"].read_text())
