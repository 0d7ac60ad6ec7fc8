"""Training objective and image metrics.

total = L1 + w_face * (1 - SSIM(full)) + w_mouth * (1 - SSIM(mouth crop))
        + w_emb * embedding_smoothness + w_opa * mean(opacity)

Every loss here can also return its gradient so the training loop never
needs an autodiff framework.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .gaussians import GaussianSet, sigmoid

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
KNN_K = 20
LAMBDA_W = 2000.0


class InsufficientPointsError(ValueError):
    pass


@dataclass
class LossWeights:
    face: float = 0.01
    mouth: float = 0.002
    opacity: float = 1e-4
    emb_reg: float = 1.0

    def __post_init__(self):
        for name in ("face", "mouth", "opacity", "emb_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def _check_same(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")


# -- photometric ----------------------------------------------------------------

def l1_loss(pred, gt, return_grad=False):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same(pred, gt)
    diff = pred - gt
    val = float(np.mean(np.abs(diff)))
    if return_grad:
        return val, np.sign(diff) / diff.size
    return val


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter(x, g):
    """Separable 'valid' correlation over the first two axes."""
    k = g.size
    h, w = x.shape[0] - k + 1, x.shape[1] - k + 1
    rows = sum(g[i] * x[i:i + h] for i in range(k))
    return sum(g[j] * rows[:, j:j + w] for j in range(k))


def _filter_adjoint(y, g, shape):
    k = g.size
    h, w = y.shape[0], y.shape[1]
    rows = np.zeros((h, shape[1]) + y.shape[2:])
    for j in range(k):
        rows[:, j:j + w] += g[j] * y
    out = np.zeros(shape)
    for i in range(k):
        out[i:i + h] += g[i] * rows
    return out


def ssim_map(pred, gt, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    return _ssim(pred, gt, window, sigma, False)[0]


def _ssim(x, y, window, sigma, want_grad):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same(x, y)
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image {x.shape[:2]} is smaller than the {window}x{window} SSIM window")
    g = gaussian_window(window, sigma)
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    if not want_grad:
        return smap, None
    # d mean(S) / dx
    scale = 1.0 / smap.size
    d_mx = scale * (2 * my * a2 / (b1 * b2) - smap * 2 * mx / b1)
    d_sxx = scale * (-smap / b2)
    d_sxy = scale * (2 * a1 / (b1 * b2))
    # sxx = F(x^2) - mx^2 and sxy = F(xy) - mx my both depend on mx
    d_mx_total = d_mx - 2 * mx * d_sxx - my * d_sxy
    grad = (_filter_adjoint(d_mx_total, g, x.shape)
            + 2 * x * _filter_adjoint(d_sxx, g, x.shape)
            + y * _filter_adjoint(d_sxy, g, x.shape))
    return smap, grad


def ssim_loss(pred, gt, return_grad=False):
    """1 - mean SSIM (11x11 Gaussian window, sigma 1.5, valid region only).

    Mean SSIM is floored at 0 (anti-correlated images), keeping the loss in [0, 1].
    """
    smap, grad = _ssim(pred, gt, SSIM_WINDOW, SSIM_SIGMA, return_grad)
    mean = float(smap.mean())
    val = 1.0 - max(mean, 0.0)
    if return_grad:
        return val, (-grad if mean > 0 else np.zeros_like(grad))
    return val


def ssim_metric(pred, gt):
    """Mean SSIM floored at 0."""
    return max(float(ssim_map(pred, gt).mean()), 0.0)


def psnr(pred, gt):
    """Peak value 1.0; identical images give ``math.inf``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def crop_region(image, rect):
    """Copy of ``image[y0:y1, x0:x1]`` for ``rect = (x0, y0, x1, y1)``."""
    x0, y0, x1, y1 = (int(v) for v in rect)
    h, w = image.shape[:2]
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ValueError(f"rectangle {rect} is outside the {w}x{h} image")
    return np.array(image[y0:y1, x0:x1], copy=True)


# -- embedding smoothness ----------------------------------------------------------

@dataclass
class KnnIndex:
    neighbors: np.ndarray  # (N, k) int
    weights: np.ndarray  # (N, k)
    lambda_w: float = LAMBDA_W

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def __len__(self):
        return self.neighbors.shape[0]


def knn_build(centers, k=KNN_K, lambda_w=LAMBDA_W) -> KnnIndex:
    """Exact k nearest neighbours (self excluded) with weights exp(-lambda_w d^2)."""
    centers = np.asarray(centers, dtype=np.float64)
    n = centers.shape[0]
    if n < 2:
        raise InsufficientPointsError("need at least two points to build a neighbour index")
    kk = min(k, n - 1)
    _, idx = cKDTree(centers).query(centers, k=kk + 1)
    idx = idx.reshape(n, kk + 1)
    rows = np.arange(n)[:, None]
    is_self = idx == rows
    # drop self; if a duplicate point displaced self from the list, drop the farthest
    drop = np.where(is_self.any(axis=1), np.argmax(is_self, axis=1), kk)
    keep = np.ones_like(idx, dtype=bool)
    keep[np.arange(n), drop] = False
    nbrs = idx[keep].reshape(n, kk)
    d2 = np.sum((centers[nbrs] - centers[:, None, :]) ** 2, axis=2)
    return KnnIndex(nbrs.astype(np.int64), np.exp(-lambda_w * d2), lambda_w)


def embedding_smoothness(z, index: KnnIndex, return_grad=False):
    """(1 / (k N)) sum_i sum_{j in knn(i)} w_ij ||z_i - z_j||_2."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if len(index) != n:
        raise ValueError(f"neighbour index covers {len(index)} points but {n} embeddings were given")
    if n == 0 or index.k == 0:
        return (0.0, np.zeros_like(z)) if return_grad else 0.0
    diff = z[:, None, :] - z[index.neighbors]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    norm = 1.0 / (index.k * n)
    val = float(norm * np.sum(index.weights * dist))
    if not return_grad:
        return val
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(dist > 0, norm * index.weights / dist, 0.0)
    contrib = coef[..., None] * diff
    grad = contrib.sum(axis=1)
    flat = index.neighbors.ravel()
    for c in range(z.shape[1]):
        grad[:, c] -= np.bincount(flat, weights=contrib[..., c].ravel(), minlength=n)
    return val, grad


def mean_knn_distance(z, index: KnnIndex) -> float:
    """Unweighted mean embedding distance to the k neighbours."""
    z = np.asarray(z, dtype=np.float64)
    return float(np.mean(np.linalg.norm(z[:, None, :] - z[index.neighbors], axis=2)))


def opacity_loss(gaussians: GaussianSet, return_grad=False):
    """Mean activated opacity; gradient is w.r.t. the opacity logits."""
    n = len(gaussians)
    if n == 0:
        raise ValueError("opacity loss is undefined for an empty scene")
    a = sigmoid(gaussians.opacity_logits)
    val = float(a.mean())
    if return_grad:
        return val, a * (1.0 - a) / n
    return val


# -- total ---------------------------------------------------------------------------

TERMS = ("l1", "ssim_face", "ssim_mouth", "emb_reg", "opacity")


def total_loss(pred, gt, mouth_rect, gaussians: GaussianSet, z, index: KnnIndex | None,
               weights: LossWeights = None, return_grad=False):
    """Weighted sum of all terms.

    Returns ``(total, breakdown)``; with ``return_grad`` also a dict holding
    gradients w.r.t. ``image``, ``embeddings`` and ``opacity_logits``.
    Breakdown values are the unweighted terms.
    """
    w = weights or LossWeights()
    parts = {}
    grads = {}
    parts["l1"], g_img = l1_loss(pred, gt, return_grad=True)
    img_grad = g_img
    if w.face > 0:
        parts["ssim_face"], g = ssim_loss(pred, gt, return_grad=True)
        img_grad = img_grad + w.face * g
    else:
        parts["ssim_face"] = ssim_loss(pred, gt)
    pm, gm = crop_region(pred, mouth_rect), crop_region(gt, mouth_rect)
    if w.mouth > 0:
        parts["ssim_mouth"], g = ssim_loss(pm, gm, return_grad=True)
        x0, y0, x1, y1 = (int(v) for v in mouth_rect)
        img_grad = img_grad.copy()
        img_grad[y0:y1, x0:x1] += w.mouth * g
    else:
        parts["ssim_mouth"] = ssim_loss(pm, gm)
    if index is not None and len(z) >= 2:
        parts["emb_reg"], g_z = embedding_smoothness(z, index, return_grad=True)
    else:
        parts["emb_reg"], g_z = 0.0, np.zeros_like(np.asarray(z, dtype=np.float64))
    parts["opacity"], g_op = opacity_loss(gaussians, return_grad=True)
    total = (parts["l1"] + w.face * parts["ssim_face"] + w.mouth * parts["ssim_mouth"]
             + w.emb_reg * parts["emb_reg"] + w.opacity * parts["opacity"])
    for name, val in parts.items():
        if not val >= 0.0:
            raise FloatingPointError(f"loss term {name} is negative or NaN: {val}")
    if return_grad:
        grads = {"image": img_grad, "embeddings": w.emb_reg * g_z, "opacity_logits": w.opacity * g_op}
        return total, parts, grads
    return total, parts
