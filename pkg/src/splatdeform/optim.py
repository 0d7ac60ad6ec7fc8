"""Joint optimisation of the canonical Gaussians, their embeddings and the
deformation MLP."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .deform import DeformField, apply_deltas, apply_deltas_backward, parse_mask
from .gaussians import GaussianSet, quaternion_to_rotmat
from .losses import (
    KNN_K,
    LAMBDA_W,
    KnnIndex,
    LossWeights,
    knn_build,
    psnr,
    ssim_metric,
    total_loss,
)
from .rasterizer import rasterize_backward, rasterize_forward, unconstrained_grads
from .scene_io import (
    Checkpoint,
    FrameDataset,
    PointCloud,
    checkpoint_header,
    checkpoint_save,
    downsample_pointcloud,
    init_gaussians_from_cloud,
    load_ply,
)

log = logging.getLogger(__name__)

GAUSSIAN_GROUPS = ("centers", "rotations", "log_scales", "opacity_logits", "sh_coeffs", "embeddings")


# -- Adam -------------------------------------------------------------------------

class AdamState:
    """Bias-corrected Adam over a dict of named arrays, updated in place."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0
        self.skipped = 0

    def _moments(self, name, p):
        if name not in self.m or self.m[name].shape != p.shape:
            self.m[name] = np.zeros_like(p, dtype=np.float64)
            self.v[name] = np.zeros_like(p, dtype=np.float64)
        return self.m[name], self.v[name]

    def step(self, params: dict, grads: dict, lr) -> bool:
        """``lr`` is a float or a dict name -> float. Returns False (and leaves
        everything untouched) if any gradient is non-finite."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                log.warning("non-finite gradient for %s; skipping Adam step %d", name, self.t + 1)
                return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
            m, v = self._moments(name, p)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            rate = lr[name] if isinstance(lr, dict) else lr
            p -= rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def resize(self, name, keep_idx, n_new):
        """Carry moments of surviving rows, append zeroed rows for new entries."""
        if name not in self.m:
            return
        for store in (self.m, self.v):
            old = store[name][keep_idx]
            pad = np.zeros((n_new,) + old.shape[1:])
            store[name] = np.concatenate([old, pad])


def adam_step(params, grads, state: AdamState, lr):
    state.step(params, grads, lr)
    return params


# -- configuration ---------------------------------------------------------------------

@dataclass
class DensifyConfig:
    interval: int = 100
    start: int = 500
    stop_fraction: float = 0.6
    grad_threshold: float = 2e-4
    split_scale_fraction: float = 0.01
    opacity_threshold: float = 5e-3
    split_factor: float = 1.6
    max_gaussians: int = 20000

    def stop(self, iterations: int) -> int:
        return int(self.stop_fraction * iterations)


@dataclass
class TrainConfig:
    """Every tunable of a run. Field names double as CLI flags and config keys."""

    iterations: int = 8000
    seed: int = 0
    deterministic: bool = True
    threads: int = 0
    sh_degree: int = 1
    emb_dim: int = 32
    hidden: int = 64
    pe_freq_z: int = 4
    pe_freq_e: int = 2
    pos_enc: bool = True
    emb_reg: bool = True
    deform_attrs: str = "mu,alpha"
    knn_k: int = KNN_K
    lambda_w: float = LAMBDA_W
    lambda_face: float = 0.01
    lambda_mouth: float = 0.002
    lambda_opa: float = 1e-4
    lr_centers: float = 1.6e-4
    lr_centers_final_ratio: float = 0.01
    lr_rotations: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_embeddings: float = 1e-3
    lr_mlp: float = 5e-4
    densify: bool = True
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop_fraction: float = 0.6
    densify_grad_threshold: float = 2e-4
    densify_scale_fraction: float = 0.01
    prune_opacity: float = 5e-3
    max_gaussians: int = 20000
    max_points: int = 100_000
    init_opacity: float = 0.1
    eval_every: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def validate(self):
        checks = [
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.emb_dim >= 1, "emb_dim must be >= 1"),
            (0 <= self.sh_degree <= 3, "sh_degree must be in 0..3"),
            (self.hidden >= 1, "hidden must be >= 1"),
            (self.pe_freq_z >= 0 and self.pe_freq_e >= 0, "positional-encoding frequencies must be >= 0"),
            (self.knn_k >= 1, "knn_k must be >= 1"),
            (min(self.lambda_face, self.lambda_mouth, self.lambda_opa, self.lambda_w) >= 0,
             "loss weights must be >= 0"),
            (self.densify_interval >= 1, "densify_interval must be >= 1"),
            (self.densify_grad_threshold > 0 and self.prune_opacity > 0, "thresholds must be > 0"),
            (self.max_gaussians >= 1 and self.max_points >= 1, "counts must be >= 1"),
            (0.0 < self.init_opacity < 1.0, "init_opacity must be in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        if not 0.0 <= self.densify_stop_fraction <= 1.0:
            raise ValueError("densify_stop_fraction must be in [0, 1]")
        parse_mask(self.deform_attrs)
        return self

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_face, self.lambda_mouth, self.lambda_opa, 1.0 if self.emb_reg else 0.0)

    @property
    def densify_config(self) -> DensifyConfig:
        return DensifyConfig(self.densify_interval, self.densify_start, self.densify_stop_fraction,
                             self.densify_grad_threshold, self.densify_scale_fraction, self.prune_opacity,
                             1.6, self.max_gaussians)

    def learning_rates(self, iteration: int) -> dict:
        frac = iteration / max(self.iterations, 1)
        return {
            "centers": self.lr_centers * self.lr_centers_final_ratio ** frac,
            "rotations": self.lr_rotations,
            "log_scales": self.lr_scales,
            "opacity_logits": self.lr_opacity,
            "sh_coeffs": self.lr_sh,
            "embeddings": self.lr_embeddings,
        }

    def make_field(self, audio_dim: int) -> DeformField:
        return DeformField(embedding_dim=self.emb_dim, audio_dim=audio_dim, sh_degree=self.sh_degree,
                           hidden=self.hidden, z_freqs=self.pe_freq_z if self.pos_enc else 0,
                           e_freqs=self.pe_freq_e if self.pos_enc else 0, include_input=True,
                           mask=self.deform_attrs, seed=self.seed)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# -- one frame ----------------------------------------------------------------------------

@dataclass
class StepResult:
    loss: float
    parts: dict
    image: np.ndarray
    gaussian_grads: dict
    field_grads: dict
    grad_audio: np.ndarray
    grad_expr: np.ndarray
    screen_grad_norm: np.ndarray
    hit: np.ndarray


def render_frame(gaussians: GaussianSet, field: DeformField, cam, background, audio, expr):
    deltas, _ = field.forward(gaussians.embeddings, audio, expr)
    deformed = apply_deltas(gaussians, deltas, field.mask)
    img, _ = rasterize_forward(deformed, cam, background)
    return img


def frame_loss(gaussians, field, cam, background, gt, audio, expr, rect, index, weights):
    """Scalar objective for one frame (no gradients)."""
    img = render_frame(gaussians, field, cam, background, audio, expr)
    return total_loss(img, gt, rect, gaussians, gaussians.embeddings, index, weights)[0]


def frame_step(gaussians: GaussianSet, field: DeformField, cam, background, gt, audio, expr, rect,
               index: KnnIndex | None, weights: LossWeights) -> StepResult:
    """Forward and backward through deform -> rasterize -> loss for one frame."""
    deltas, cache = field.forward(gaussians.embeddings, audio, expr)
    deformed = apply_deltas(gaussians, deltas, field.mask)
    img, ctx = rasterize_forward(deformed, cam, background)
    loss, parts, lg = total_loss(img, gt, rect, gaussians, gaussians.embeddings, index, weights, return_grad=True)
    rg = rasterize_backward(ctx, lg["image"])
    dgrads = unconstrained_grads(rg, deformed)
    canon, g_delta = apply_deltas_backward(gaussians, deltas, dgrads, field.mask)
    fgrads, g_z, g_a, g_e = field.backward(cache, g_delta)
    ggrads = {
        "centers": canon["centers"],
        "rotations": canon["rotations"],
        "log_scales": canon["log_scales"],
        "opacity_logits": canon["opacity_logits"] + lg["opacity_logits"],
        "sh_coeffs": canon["sh_coeffs"],
        "embeddings": g_z + lg["embeddings"],
    }
    return StepResult(loss, parts, img, ggrads, fgrads, g_a, g_e, rg.screen_grad_norm, rg.hit)


# -- densification ---------------------------------------------------------------------------

@dataclass
class DensifyStats:
    grad_accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n, np.int64))

    def add(self, screen_grad_norm, hit):
        self.grad_accum[hit] += screen_grad_norm[hit]
        self.count[hit] += 1


@dataclass
class DensifyEvent:
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    skipped: bool = False


def densify_and_prune(gaussians: GaussianSet, stats: DensifyStats, adam: AdamState | None,
                      cfg: DensifyConfig, scene_extent: float, rng, knn_k=KNN_K, lambda_w=LAMBDA_W):
    """Clone small and split large high-gradient Gaussians, then prune
    near-transparent ones. Returns (new set, KnnIndex, DensifyEvent)."""
    n = len(gaussians)
    ev = DensifyEvent()
    avg = np.where(stats.count > 0, stats.grad_accum / np.maximum(stats.count, 1), 0.0)
    hot = avg >= cfg.grad_threshold
    max_scale = gaussians.scales.max(axis=1) if n else np.zeros(0)
    small = max_scale <= cfg.split_scale_fraction * scene_extent
    clone_mask = hot & small
    split_mask = hot & ~small
    n_after = n + clone_mask.sum() + split_mask.sum()
    if n_after > cfg.max_gaussians:
        log.info("densification skipped: %d Gaussians would exceed the cap of %d", n_after, cfg.max_gaussians)
        ev.skipped = True
        clone_mask[:] = False
        split_mask[:] = False

    parts = []
    if clone_mask.any():
        clones = gaussians.subset(clone_mask)
        step = 0.5 * clones.scales * rng.standard_normal((len(clones), 3))
        clones.centers = clones.centers + step
        parts.append(clones)
    if split_mask.any():
        parent = gaussians.subset(split_mask)
        rot = quaternion_to_rotmat(parent.unit_rotations)
        kids = []
        for _ in range(2):
            child = parent.copy()
            local = rng.standard_normal((len(parent), 3)) * parent.scales
            child.centers = parent.centers + np.einsum("nij,nj->ni", rot, local)
            child.log_scales = parent.log_scales - np.log(cfg.split_factor)
            kids.append(child)
        parts.append(kids[0].concat(kids[1]))
    ev.cloned, ev.split = int(clone_mask.sum()), int(split_mask.sum())

    keep = ~split_mask & (gaussians.opacities >= cfg.opacity_threshold)
    ev.pruned = int(np.sum(~keep & ~split_mask))
    out = gaussians.subset(keep)
    for p in parts:
        out = out.concat(p)
    # children of pruned parents are dropped as well
    if parts:
        fresh = np.ones(len(out), bool)
        fresh[:keep.sum()] = False
        low = fresh & (out.opacities < cfg.opacity_threshold)
        if low.any():
            out = out.subset(~low)
    n_new = len(out) - int(keep.sum())
    if adam is not None:
        keep_idx = np.nonzero(keep)[0]
        for name in GAUSSIAN_GROUPS:
            adam.resize(name, keep_idx, n_new)
    index = knn_build(out.centers, knn_k, lambda_w) if len(out) >= 2 else None
    return out, index, ev


# -- training ------------------------------------------------------------------------------------

CSV_HEADER = "iteration,l1,ssim_face,ssim_mouth,emb_reg,opacity,total,psnr"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)
    events: list = field(default_factory=list)
    seconds: float = 0.0


def init_model(point_cloud: PointCloud, dataset: FrameDataset, cfg: TrainConfig):
    pc = downsample_pointcloud(point_cloud, cfg.max_points, seed=cfg.seed)
    g = init_gaussians_from_cloud(pc, cfg.emb_dim, seed=cfg.seed, sh_degree=cfg.sh_degree,
                                  init_opacity=cfg.init_opacity)
    return g, cfg.make_field(dataset.audio_dim)


def evaluate(gaussians, field, dataset: FrameDataset, indices) -> dict:
    ps, ss = [], []
    for n in indices:
        img = render_frame(gaussians, field, dataset.camera, dataset.background, dataset.audio[n], dataset.expr[n])
        ps.append(psnr(img, dataset.images[n]))
        ss.append(ssim_metric(img, dataset.images[n]))
    return {"psnr": float(np.mean(ps)) if ps else float("nan"), "ssim": float(np.mean(ss)) if ss else float("nan")}


def _set_threads(cfg: TrainConfig):
    import numba

    n = cfg.threads if cfg.threads > 0 else numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def train(dataset: FrameDataset, cfg: TrainConfig = None, point_cloud: PointCloud | None = None,
          out_dir=None, init: tuple | None = None, progress=None, log_path=None,
          checkpoint_path=None) -> TrainResult:
    """Optimise a scene against ``dataset``; returns the final checkpoint.

    The initial point cloud is ``point_cloud`` or the dataset's
    ``canonical.ply``. ``init`` may supply a ready (GaussianSet, DeformField).
    With ``out_dir`` the CSV log, periodic checkpoints and ``final.spld`` go
    there; ``log_path`` and ``checkpoint_path`` override the two file names.
    """
    cfg = (cfg or TrainConfig()).validate()
    _set_threads(cfg)
    t0 = time.perf_counter()
    if init is not None:
        gaussians, field = init[0].copy(), init[1].copy()
    else:
        if point_cloud is None:
            if dataset.root is None:
                raise ValueError("no point cloud given and the dataset has no directory")
            point_cloud = load_ply(Path(dataset.root) / "canonical.ply")
        gaussians, field = init_model(point_cloud, dataset, cfg)
    gaussians = gaussians.astype(np.float64)
    field.params = {k: v.astype(np.float64) for k, v in field.params.items()}
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_path or out_dir / "train_log.csv"
        checkpoint_path = checkpoint_path or out_dir / "final.spld"
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w")
        log_fh.write(CSV_HEADER + "\n")

    rng = np.random.default_rng(cfg.seed)
    weights = cfg.weights
    dcfg = cfg.densify_config
    dens_stop = dcfg.stop(cfg.iterations)
    adam = AdamState()
    index = knn_build(gaussians.centers, cfg.knn_k, cfg.lambda_w) if len(gaussians) >= 2 else None
    extent = float(np.max(np.linalg.norm(gaussians.centers - gaussians.centers.mean(0), axis=1))) if len(gaussians) else 1.0
    stats = DensifyStats.zeros(len(gaussians))
    train_idx = dataset.train_indices
    order = np.array([], dtype=np.int64)
    history, events = [], []
    cam, bg = dataset.camera, dataset.background

    for it in range(1, cfg.iterations + 1):
        if order.size == 0:
            order = rng.permutation(train_idx)
        n, order = order[0], order[1:]
        res = frame_step(gaussians, field, cam, bg, dataset.images[n], dataset.audio[n], dataset.expr[n],
                         dataset.mouth_rects[n], index, weights)
        if not math.isfinite(res.loss):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        params = dict(gaussians.arrays())
        grads = dict(res.gaussian_grads)
        lrs = cfg.learning_rates(it - 1)
        for k, v in field.params.items():
            params[f"mlp.{k}"] = v
            grads[f"mlp.{k}"] = res.field_grads[k]
            lrs[f"mlp.{k}"] = cfg.lr_mlp
        adam.step(params, grads, lrs)
        stats.add(res.screen_grad_norm, res.hit)

        if cfg.densify and dcfg.start <= it <= dens_stop and it % dcfg.interval == 0:
            gaussians, index, ev = densify_and_prune(gaussians, stats, adam, dcfg, extent, rng,
                                                     cfg.knn_k, cfg.lambda_w)
            for name in GAUSSIAN_GROUPS:
                if name in adam.m:
                    assert adam.m[name].shape == getattr(gaussians, name).shape, name
            events.append((it, ev))
            stats = DensifyStats.zeros(len(gaussians))

        if log_fh is not None and (it % max(cfg.log_every, 1) == 0 or it == cfg.iterations):
            p = res.parts
            log_fh.write(f"{it},{p['l1']:.8g},{p['ssim_face']:.8g},{p['ssim_mouth']:.8g},{p['emb_reg']:.8g},"
                         f"{p['opacity']:.8g},{res.loss:.8g},{psnr(res.image, dataset.images[n]):.6g}\n")
        history.append(res.loss)
        if cfg.eval_every and it % cfg.eval_every == 0:
            m = evaluate(gaussians, field, dataset, dataset.test_indices)
            log.info("iter %d: loss %.5f held-out psnr %.2f ssim %.4f N=%d", it, res.loss, m["psnr"],
                     m["ssim"], len(gaussians))
        if out_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            checkpoint_save(Checkpoint(gaussians, field, it, cfg.seed), out_dir / f"ckpt_{it:06d}.spld")
        if progress is not None:
            progress(it, res, gaussians)

    if log_fh is not None:
        log_fh.close()
    ck = Checkpoint(gaussians, field, cfg.iterations, cfg.seed)
    if checkpoint_path is not None:
        checkpoint_save(ck, checkpoint_path)
    return TrainResult(ck, history, events, time.perf_counter() - t0)


# -- model size ---------------------------------------------------------------------------

def model_size_report(ck: Checkpoint) -> dict:
    g, f = ck.gaussians, ck.field
    n, k = len(g), 3 * (g.sh_degree + 1) ** 2
    per_gaussian_floats = 11 + k + g.embedding_dim
    report = {
        "gaussians": n,
        "per_gaussian_floats": per_gaussian_floats,
        "attribute_bytes": 4 * n * (11 + k),
        "embedding_bytes": 4 * n * g.embedding_dim,
        "mlp_bytes": 4 * f.n_params(),
        "header_bytes": len(checkpoint_header(ck)),
    }
    report["payload_bytes"] = report["attribute_bytes"] + report["embedding_bytes"] + report["mlp_bytes"]
    report["file_bytes"] = report["header_bytes"] + report["payload_bytes"]
    return report
