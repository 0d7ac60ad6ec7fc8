"""Generate a small synthetic talking-aperture dataset, fit it briefly and
score the held-out frames.

    python3 demos/quickstart.py [out_dir] [iterations]
"""

import sys
from pathlib import Path

import numpy as np

from splatdeform import SynthConfig, TrainConfig, load_dataset, model_size_report, synth_scene_generate, train
from splatdeform.optim import evaluate, render_frame
from splatdeform.rasterizer import write_ppm
from splatdeform.scene_io import measure_aperture_gap

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
iterations = int(sys.argv[2]) if len(sys.argv) > 2 else 600

synth_scene_generate(SynthConfig(frames=66, seed=1), out / "data")
ds = load_dataset(out / "data")
print(f"{len(ds)} frames, {len(ds.train_indices)} train / {len(ds.test_indices)} test")

res = train(ds, TrainConfig(iterations=iterations, log_every=50), out_dir=out / "run")
ck = res.checkpoint
print(f"trained {iterations} iterations in {res.seconds:.0f} s, {len(ck.gaussians)} Gaussians")
print("held-out", evaluate(ck.gaussians, ck.field, ds, ds.test_indices))

# the lip opening should follow the first audio channel
for n in ds.test_indices:
    img = render_frame(ck.gaussians, ck.field, ds.camera, ds.background, ds.audio[n], ds.expr[n])
    write_ppm(out / f"test_{n:04d}.ppm", img)
    gt = measure_aperture_gap(ds.images[n], ds.background, ds.mouth_rects[n])
    got = measure_aperture_gap(img, ds.background, ds.mouth_rects[n])
    print(f"frame {n}: a1 {ds.audio[n, 0]:+.2f}  gap gt {gt:.2f}  rendered {got:.2f}")

rep = model_size_report(ck)
print(f"checkpoint {rep['file_bytes']} bytes, {rep['per_gaussian_floats']} floats per Gaussian")
print("mean embedding norm", float(np.linalg.norm(ck.gaussians.embeddings, axis=1).mean()))
