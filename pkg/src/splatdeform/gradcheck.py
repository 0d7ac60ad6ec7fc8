"""Finite-difference checks of the full analytic gradient chain.

The objective is ``total_loss`` of one rendered frame, differentiated with
respect to every parameter class: canonical attributes, embeddings, MLP
weights and both driving feature vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .deform import ATTRIBUTES, DeformField
from .gaussians import GaussianSet
from .losses import LossWeights, knn_build
from .optim import frame_loss, frame_step

CLASSES = ("centers", "rotations", "log_scales", "opacity_logits", "sh_coeffs", "embeddings", "mlp", "audio", "expr")
REL_TOL = 1e-3
ABS_TOL = 1e-6
SMALL = 1e-4


@dataclass
class GradcheckProblem:
    gaussians: GaussianSet
    field: DeformField
    cam: Camera
    background: np.ndarray
    gt: np.ndarray
    audio: np.ndarray
    expr: np.ndarray
    rect: tuple
    weights: LossWeights


def random_problem(seed=0, n=40, size=32, emb_dim=8, sh_degree=1, mask=ATTRIBUTES, head_scale=0.02):
    """Small random scene with perturbed (non-zero) deformation heads."""
    rng = np.random.default_rng(seed)
    cam = Camera.simple(size, size, 0.9 * size)
    xy = rng.uniform(-0.45, 0.45, (n, 2)) * 3.0
    centers = np.column_stack([xy, rng.uniform(2.5, 3.5, n)])
    g = GaussianSet(
        centers,
        rng.normal(size=(n, 4)),
        np.log(rng.uniform(0.05, 0.25, (n, 3))),
        rng.normal(0.0, 1.0, n),
        rng.normal(0.0, 0.4, (n, (sh_degree + 1) ** 2, 3)),
        rng.normal(0.0, 0.3, (n, emb_dim)),
    )
    field = DeformField(embedding_dim=emb_dim, audio_dim=4, sh_degree=sh_degree, hidden=16,
                        z_freqs=2, e_freqs=1, mask=mask, seed=seed)
    for k in field.params:
        if k.startswith("head."):
            field.params[k] = rng.normal(0.0, head_scale, field.params[k].shape)
        elif k.endswith(".b"):
            field.params[k] = rng.normal(0.0, 0.05, field.params[k].shape)
    bg = rng.uniform(0.0, 1.0, (size, size, 3))
    gt = rng.uniform(0.0, 1.0, (size, size, 3))
    audio = rng.normal(0.0, 0.5, 4)
    expr = rng.uniform(0.0, 1.0, 6)
    q = size // 4
    rect = (q, q, q + max(size // 2, 12), q + max(size // 2, 12))
    # heavier perceptual weights than the defaults so those paths are exercised
    weights = LossWeights(face=0.2, mouth=0.1, opacity=0.05, emb_reg=1.0)
    return GradcheckProblem(g, field, cam, bg, gt, audio, expr, rect, weights)


def _views(p: GradcheckProblem):
    """Name -> list of (array, gradient key) pairs whose entries can be perturbed in place."""
    v = {c: [(getattr(p.gaussians, c), c)] for c in CLASSES[:6]}
    v["mlp"] = [(arr, ("mlp", k)) for k, arr in p.field.params.items()]
    v["audio"] = [(p.audio, "audio")]
    v["expr"] = [(p.expr, "expr")]
    return v


def check_problem(p: GradcheckProblem, samples=12, eps=1e-6, seed=0) -> dict:
    """Max relative error per parameter class over ``samples`` random entries
    (all entries when the class is smaller). Entries with both analytic and
    numeric magnitude below ``SMALL`` are judged by absolute error instead."""
    rng = np.random.default_rng(seed)
    index = knn_build(p.gaussians.centers, k=min(20, len(p.gaussians) - 1), lambda_w=20.0)
    res = frame_step(p.gaussians, p.field, p.cam, p.background, p.gt, p.audio, p.expr, p.rect, index, p.weights)
    analytic = dict(res.gaussian_grads)
    analytic["audio"] = res.grad_audio
    analytic["expr"] = res.grad_expr
    for k, g in res.field_grads.items():
        analytic[("mlp", k)] = g

    def loss():
        return frame_loss(p.gaussians, p.field, p.cam, p.background, p.gt, p.audio, p.expr, p.rect,
                          index, p.weights)

    report = {}
    for cls, items in _views(p).items():
        entries = [(arr, key, i) for arr, key in items for i in range(arr.size)]
        if len(entries) > samples:
            pick = rng.choice(len(entries), samples, replace=False)
            entries = [entries[i] for i in pick]
        worst_rel, worst_abs, n_ok = 0.0, 0.0, 0
        for arr, key, i in entries:
            flat = arr.reshape(-1)
            old = flat[i]
            flat[i] = old + eps
            lp = loss()
            flat[i] = old - eps
            lm = loss()
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            ana = float(analytic[key].reshape(-1)[i])
            err = abs(ana - num)
            if max(abs(ana), abs(num)) < SMALL:
                worst_abs = max(worst_abs, err)
                n_ok += err <= ABS_TOL
            else:
                rel = err / max(abs(ana), abs(num))
                worst_rel = max(worst_rel, rel)
                n_ok += rel <= REL_TOL
        report[cls] = {"max_rel": worst_rel, "max_abs_small": worst_abs, "checked": len(entries),
                       "ok": n_ok == len(entries)}
    return report


def run_gradcheck(seeds=(0, 1, 2), n=40, size=32, samples=12) -> dict:
    """Aggregate report over several seeded problems."""
    total = {c: {"max_rel": 0.0, "max_abs_small": 0.0, "checked": 0, "ok": True} for c in CLASSES}
    for s in seeds:
        rep = check_problem(random_problem(seed=s, n=n, size=size), samples=samples, seed=s)
        for c, r in rep.items():
            t = total[c]
            t["max_rel"] = max(t["max_rel"], r["max_rel"])
            t["max_abs_small"] = max(t["max_abs_small"], r["max_abs_small"])
            t["checked"] += r["checked"]
            t["ok"] = t["ok"] and r["ok"]
    return total
