"""Train a four-glimpse model on the synthetic task and read off its accuracy.

Every video shows class patterns in only a quarter of its frames, with
distractor patterns everywhere else. The model has to find the informative
frames and locations on its own.

Run: python3 demos/quickstart.py   (about 15 s on one core)
"""

from rra import SyntheticSpec, generate_synthetic, train
from rra.experiments import toy_train_config

data = generate_synthetic(SyntheticSpec(seed=0))
print(f"{len(data.train)} training and {len(data.test)} test videos, "
      f"{data.train[0].frame_count} frames each, frame shape {data.train[0].frames.shape[1:]}")

config = toy_train_config(K=4, loss="li+le", seed=0)
result = train(config, data)

for row in result.history:
    print(f"epoch {row['epoch']:2d}  lr {row['lr']:.1e}  train loss {row['train_loss']:.4f}")

ev = result.final_eval
print(f"\ntest top-1 {100 * ev.top1:.1f}%   (chance {100 / data.num_classes:.0f}%)")
print(f"mean per-class accuracy {100 * ev.mean_per_class:.1f}%")
print("each glimpse on its own:", "  ".join(f"{100 * a:.1f}%" for a in ev.per_glimpse_top1))
print(f"{ev.inputs_per_video} frames scored per test video")
