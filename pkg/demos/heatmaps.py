"""Where does each glimpse look, and what does it switch off?

Trains a small model, then for one test video renders

* attention-influence maps: how strongly each pixel steers glimpse k's
  attention distribution, and
* a suppression map: the pixels behind the channels glimpse 1 pushed down
  before glimpse 2 looked again.

PNG files land in demos/out/heatmaps/.

Run: python3 demos/heatmaps.py   (a few seconds)
"""

from pathlib import Path

import numpy as np

from rra import SamplingSpec, SyntheticSpec, generate_synthetic, train
from rra.data import sample_test_frames, test_clips
from rra.experiments import toy_train_config
from rra.visualize import HeatmapRequest, influence_map, render_video, suppression_map

data = generate_synthetic(SyntheticSpec(num_classes=5, train_per_class=30, test_per_class=10, seed=0))
model = train(toy_train_config(K=2, total_epochs=12, seed=0), data).model

video = data.test[0]
spec = SamplingSpec(n_segments=4, mode="test", input_size=32)
frames = test_clips(video, spec)[0]  # (n, C, H, W), center crop
print(f"video {video.id}, label {video.label}, frames {sample_test_frames(video, spec)}")

# Influence mass per frame: informative frames should draw more of it.
for k in (1, 2):
    mass = influence_map(model, frames, k).sum(axis=(1, 2))
    print(f"glimpse {k} influence share per frame:", np.round(mass / mass.sum(), 3))

heat, channels = suppression_map(model, frames, k=1, top_m=4, return_channels=True)
print("channels most suppressed after glimpse 1:", channels.tolist())

out = Path(__file__).parent / "out" / "heatmaps"
paths = render_video(model, frames, video.id, out, HeatmapRequest(gaussian_sigma=1.5, overlay_alpha=0.6),
                     suppression=(1, 4))
print(f"wrote {len(paths)} images to {out}")
