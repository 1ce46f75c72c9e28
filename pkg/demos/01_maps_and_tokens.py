"""
Maps, labels and the digit vocabulary
=====================================

Builds a handful of synthetic maps, prints one as ASCII art, and walks the
coordinates through the tokenizer that joins the two halves of the chained
pipeline.

Run with ``python demos/01_maps_and_tokens.py``.
"""

# %%
# A scene is two squares and a triangle on the unit square; the label is the
# square nearest to the triangle.
import tempfile

import numpy as np

from pipebench import connector as cn
from pipebench.scenegen import DatasetConfig, Point, generate_dataset, nearest_square, rasterize, sample_scene

cfg = DatasetConfig(n_samples=40, n_eval=5, n_test=5, image_h=64, image_w=64, seed=42,
                    square_side_px=5, triangle_side_px=7, margin=0.08)
scene = sample_scene(cfg, 0)
print(scene)

# %%
# Rasterized: black shapes on white, y pointing up.
img = rasterize(scene, cfg)
for row in img[::2]:
    print("".join("#" if v == 0 else "." for v in row))

# %%
# The first published example, triangle at (0.622, 0.439).
idx, target = nearest_square([Point(0.517, 0.898), Point(0.378, 0.886)], Point(0.622, 0.439))
print("nearest square:", idx, target)

# %%
# Tokenizing that scene with three decimals gives the training sequence of the
# transformer: six context values, a separator, then the target slot.
seq = cn.encode_sequence([(0.517, 0.898), (0.378, 0.886), (0.622, 0.439)], (0.517, 0.898))
print(repr(str(seq)), len(seq), "tokens")
print("ids:", seq.ids)
print("decoded target:", cn.decode_point(seq.target, 3))

# %%
# Rounding is half-up on the written decimal and values are clamped to [0, 1).
for v in (0.8985, 0.12345, -0.2, 1.0):
    print(v, "->", cn.encode_value(v, 3), cn.decode_value(cn.encode_value(v, 3), 3))

# %%
# A full dataset on disk: PGM images plus train/eval/test CSV manifests.
with tempfile.TemporaryDirectory() as tmp:
    manifest = generate_dataset(cfg, tmp)
    print(len(manifest.train), len(manifest.eval), len(manifest.test))
    print(open(f"{tmp}/test.csv").read().splitlines()[:3])
    print(np.unique(manifest.load_images("test")))
