"""
Feeding odd-shaped radar maps to a 224x224 transformer
======================================================

A range-time map from the cabin radar is 51 x 500 bins, far from the square
224 x 224 image a pretrained vision transformer expects.  This walk-through
shows how the input adapter stretches the map, resizes the projection kernel
and keeps the 14 x 14 token grid (and therefore every positional embedding)
intact.
"""

import numpy as np

from uwbdar import adapt
from uwbdar.model import EncoderConfig, random_bundle

# The plan picks the smallest patch side k with 14 * k covering the long side.
for shape in [(51, 500), (1024, 24), (224, 224), (89, 500)]:
    plan = adapt.compute_patch_plan(*shape)
    print(f"{str(shape):>12} -> k = {plan.k:3d}, canvas {plan.side_extended} px, "
          f"scale factors {plan.scale_factors[0]:.2f} x {plan.scale_factors[1]:.2f}")

# %%
# The pretrained 16 x 16 kernel is resized to k x k.  Shrinking uses area
# pooling, so the kernel mean never moves; growing uses bilinear
# interpolation.
bundle = random_bundle(EncoderConfig(d=16, layers=1, heads=2), seed=0)
k16 = bundle.kernel16()[0]
for k in (4, 7, 16, 36):
    kk = adapt.adapt_kernel(k16, k).weights
    print(f"k = {k:2d}: kernel {kk.shape}, mean {kk.mean():+.6f} (original {k16.mean():+.6f})")

# %%
# Tokenizing a map: 196 patch tokens plus the class token.
rng = np.random.default_rng(1)
range_map = np.abs(rng.standard_normal((51, 500)))
plan = adapt.compute_patch_plan(*range_map.shape)
canvas = adapt.extend_and_resize(range_map, plan)
seq = adapt.patch_embed(canvas, adapt.adapt_kernel(bundle.kernel16(), plan.k, bundle.kernel_bias), bundle.pev,
                        class_token=bundle.class_token)
print("canvas", canvas.shape, "-> tokens", seq.tokens.shape)

# %%
# The three baselines change something else instead: the image (simple
# resize), the patch shape or the positional grid.
print("simple resize keeps the kernel, squashes the map to", adapt.baseline_simple_resize(range_map).shape)
print("patch-shape baseline uses patches of", adapt.patch_shape_for(*range_map.shape))
print("PEV-manipulation baseline uses a token grid of", adapt.pev_grid_shape_for(*range_map.shape))
