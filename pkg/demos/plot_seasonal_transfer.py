"""
Seasonal transfer and resource accounting
=========================================

Summer scenes hold open water and thick first-year ice, winter scenes new
and young ice.  A model trained on one season has never seen the other
season's classes, and the transfer matrix shows it.
"""
import json
import tempfile

from icebench import experiments as ex
from icebench.partition import MeltClimatology, PartitionContext
from icebench.synthgen import generate_paired_shift, separable_spec

root = tempfile.mkdtemp(prefix="icebench_demo_")
spec = separable_spec(n_scenes=6, height=160, width=160, coarse_factor=8, n_polygons=3)
train = generate_paired_shift(spec, "season", root + "/train")
test = generate_paired_shift(spec.replace(seed=1), "season", root + "/test")
with open(root + "/train/climatology.json") as fh:
    ctx = PartitionContext(climatology=MeltClimatology.from_json(json.load(fh)))

cfg = ex.PipelineConfig.from_json({
    "paradigm": "patch",
    "sampling": {"patch_size": 32, "stride": 16},
    "train": {"learning_rate": 0.05, "max_epochs": 30, "early_stop_patience": 4},
    "holdout": {"fixed_count": 1},
    "monitor_interval_ms": 50,
})

###############################################################################
# Transfer matrix
# ---------------
# Rows are training partitions, columns test partitions.  ``All`` pools the
# listed rows and ``Baseline`` uses the unfiltered manifest.

rep = ex.run_transferability(cfg, train["summer"] + train["winter"], test["summer"] + test["winter"], "season", ctx,
                             train_keys=["summer", "winter"], test_keys=["summer", "winter"])
print(f"{'train':>9} | {'summer':>7} {'winter':>7}")
for row in ("summer", "winter", "All", "Baseline"):
    cells = {c["test_key"]: c for c in rep["cells"] if c["train_key"] == row}
    f1 = [cells[k]["metrics"]["weighted"]["f1"] if cells[k]["status"] == "ok" else float("nan")
          for k in ("summer", "winter")]
    print(f"{row:>9} | {f1[0]:7.3f} {f1[1]:7.3f}")

###############################################################################
# Efficiency
# ----------
# Every cell carries peak and mean memory and core-hours for training and
# inference.  On a toy problem they are tiny, but the bookkeeping is the
# same.

eff = next(c for c in rep["cells"] if c["status"] == "ok")["efficiency"]
print(f"training: peak {eff['MaxMT']:.3f} GB, mean {eff['AvgMT']:.3f} GB, {eff['TotCT'] * 3600:.2f} core-seconds")
print(f"inference: {eff['TotTI'] * 60:.2f} s wall")
