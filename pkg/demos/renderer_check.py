"""Compare the tiled rasterizer with the per-pixel reference on a random
scene, then time both.

    python3 demos/renderer_check.py [gaussians] [size]
"""

import sys

import numpy as np

from splatdeform import Camera, rasterize_brute_force, rasterize_forward
from splatdeform.cli import bench, random_bench_scene

n = int(sys.argv[1]) if len(sys.argv) > 1 else 300
size = int(sys.argv[2]) if len(sys.argv) > 2 else 96

g = random_bench_scene(n, seed=3)
cam = Camera.simple(size, size, 0.9 * size)
bg = np.full((size, size, 3), 0.5)

img, ctx = rasterize_forward(g, cam, bg)
ref = rasterize_brute_force(g, cam, bg)
print(f"max |tiled - reference| = {np.abs(img - ref).max():.2e}")
print(f"max |sum of weights + T - 1| = {np.abs(ctx.weight_sum + ctx.t_final - 1).max():.2e}")

t_tiled, t_brute = bench(g, cam, bg, repeats=3)
print(f"tiled {1 / t_tiled:.1f} fps, reference {1 / t_brute:.2f} fps, speedup {t_brute / t_tiled:.1f}x")
