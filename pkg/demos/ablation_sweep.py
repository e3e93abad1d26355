"""A miniature glimpse-count sweep with per-seed results and medians.

The acceptance suite runs five seeds; this demo uses two, so it takes
about two minutes. Cells are
cached under demos/out/sweep/cells, so a second run returns at once.

Run: python3 demos/ablation_sweep.py
"""

from pathlib import Path

from rra import SyntheticSpec, generate_synthetic
from rra.experiments import compare_parallel, sweep_glimpses, toy_train_config

data = generate_synthetic(SyntheticSpec(seed=0))
base = toy_train_config()
out = Path(__file__).parent / "out" / "sweep"

glimpses = sweep_glimpses(data, base, K_list=(1, 2, 4), seeds=(0, 1), out_dir=out)
print(glimpses.summary())
for row in glimpses.rows:
    print(f"K={row['label']}: per seed", [f"{100 * x:.1f}" for x in row["top1_per_seed"]])

print()
print(compare_parallel(data, base.replace(K=4), seeds=(0, 1), out_dir=out).summary())
print(f"tables written to {out}")
