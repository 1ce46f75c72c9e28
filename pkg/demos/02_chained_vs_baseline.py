"""
A small chained run against the baseline
========================================

Trains both stages of the chained pipeline for a few hundred steps on a small
dataset, then compares it with a CNN that regresses the answer directly. Takes
a couple of minutes on one core. The numbers are far from the desk-scale
results; the point is the workflow.

Run with ``python demos/02_chained_vs_baseline.py``.
"""

# %%
import tempfile

from pipebench.evalreport import build_report
from pipebench.pipelines import TrainConfig, coordinate_training_set, train_baseline_cnn, train_chained
from pipebench.scenegen import DatasetConfig, generate_dataset

tmp = tempfile.mkdtemp()
cfg = DatasetConfig(n_samples=2400, n_eval=200, n_test=200, image_h=64, image_w=64, seed=7,
                    square_side_px=5, triangle_side_px=7, margin=0.08)
manifest = generate_dataset(cfg, f"{tmp}/data")

# %%
# Stage one regresses all six coordinates; stage two reads them as digits and
# writes the nearest square. The transformer sees coordinate-only scenes from a
# separate random stream, so it never trains on the test maps.
cnn_cfg = TrainConfig(learning_rate=1e-3, steps=300, n_eval=200)
tr_cfg = TrainConfig(learning_rate=1e-3, steps=300, d_model=64, heads=4, layers=2, ff=256, n_eval=200)
coords = coordinate_training_set(cfg, 20_000, 200, 200)
chained, _ = train_chained(cnn_cfg, tr_cfg, manifest, coords)
print("chained :", chained.final.mean_err, "+/-", chained.final.std_err)

# %%
# The baseline skips the intermediate labels entirely.
baseline, _ = train_baseline_cnn(TrainConfig(learning_rate=1e-3, steps=300, n_eval=200), manifest)
print("baseline:", baseline.final.mean_err, "+/-", baseline.final.std_err)

# %%
# Chained training needs labels for both sub-tasks, hence 2N.
table = build_report([chained, baseline], f"{tmp}/report")
print(open(f"{tmp}/report/report.md").read())
