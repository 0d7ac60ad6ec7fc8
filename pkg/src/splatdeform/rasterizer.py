"""Tile-based, depth-ordered alpha compositing of projected Gaussians onto a
background plate, with an analytic backward pass and a brute-force oracle.

Per pixel p the forward map is

    C(p) = sum_i c_i a_i prod_{j<i} (1 - a_j) + T_final * background(p)
    a_i  = min(0.99, opacity_i * exp(-0.5 d^T conic_i d)),  d = mean_i - p

with contributions below 1/255 skipped and blending stopped before the
transmittance would drop under 1e-4.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numba
import numpy as np

from .camera import Camera, conic_and_radius, in_frustum, projection_jacobian, screen_covariance
from .gaussians import (
    GaussianSet,
    normalize_quaternion_grad,
    quaternion_to_rotmat,
    rotmat_to_quaternion_grad,
    sh_basis,
    sh_basis_jacobian,
    sigmoid,
)

# an old system TBB only means numba falls back to its OpenMP/workqueue layer
warnings.filterwarnings("ignore", message="The TBB threading layer")

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


class StaleContextError(RuntimeError):
    pass


# -- numba kernels ------------------------------------------------------------

@numba.njit(parallel=True, cache=True)
def _forward_tiles(tile_ranges, ids, means, conics, colors, opac, bg, width, height, tiles_x):
    n_tiles = tile_ranges.shape[0]
    out = np.empty((height, width, 3), dtype=means.dtype)
    t_final = np.empty((height, width), dtype=means.dtype)
    wsum = np.empty((height, width), dtype=means.dtype)
    n_contrib = np.zeros((height, width), dtype=np.int32)
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_ranges[tile, 0]
        end = tile_ranges[tile, 1]
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                ws = 0.0
                last = 0
                for k in range(start, end):
                    g = ids[k]
                    dx = means[g, 0] - px
                    dy = means[g, 1] - py
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    alpha = min(0.99, opac[g] * math.exp(power))
                    if alpha < 1.0 / 255.0:
                        continue
                    test_t = T * (1.0 - alpha)
                    if test_t < 1e-4:
                        break
                    w = alpha * T
                    c0 += colors[g, 0] * w
                    c1 += colors[g, 1] * w
                    c2 += colors[g, 2] * w
                    ws += w
                    T = test_t
                    last = k - start + 1
                out[py, px, 0] = c0 + T * bg[py, px, 0]
                out[py, px, 1] = c1 + T * bg[py, px, 1]
                out[py, px, 2] = c2 + T * bg[py, px, 2]
                t_final[py, px] = T
                wsum[py, px] = ws
                n_contrib[py, px] = last
    return out, t_final, wsum, n_contrib


@numba.njit(parallel=True, cache=True)
def _backward_tiles(tile_ranges, ids, means, conics, colors, opac, bg, t_final, n_contrib,
                    grad_out, width, height, tiles_x):
    """Per tile-list entry gradients: (dmean_x, dmean_y, dconic_a, dconic_b,
    dconic_c, dcolor_r, dcolor_g, dcolor_b, dopacity)."""
    n_tiles = tile_ranges.shape[0]
    entry = np.zeros((ids.shape[0], 9), dtype=means.dtype)
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_ranges[tile, 0]
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                T = t_final[py, px]
                g0 = grad_out[py, px, 0]
                g1 = grad_out[py, px, 1]
                g2 = grad_out[py, px, 2]
                acc0 = bg[py, px, 0]
                acc1 = bg[py, px, 1]
                acc2 = bg[py, px, 2]
                for k in range(start + n_contrib[py, px] - 1, start - 1, -1):
                    g = ids[k]
                    dx = means[g, 0] - px
                    dy = means[g, 1] - py
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    gauss = math.exp(power)
                    raw = opac[g] * gauss
                    alpha = min(0.99, raw)
                    if alpha < 1.0 / 255.0:
                        continue
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    entry[k, 5] += w * g0
                    entry[k, 6] += w * g1
                    entry[k, 7] += w * g2
                    col0 = colors[g, 0]
                    col1 = colors[g, 1]
                    col2 = colors[g, 2]
                    d_alpha = T * ((col0 - acc0) * g0 + (col1 - acc1) * g1 + (col2 - acc2) * g2)
                    acc0 = alpha * col0 + (1.0 - alpha) * acc0
                    acc1 = alpha * col1 + (1.0 - alpha) * acc1
                    acc2 = alpha * col2 + (1.0 - alpha) * acc2
                    if raw > 0.99:
                        continue
                    entry[k, 8] += gauss * d_alpha
                    d_power = raw * d_alpha
                    entry[k, 0] += -d_power * (conics[g, 0] * dx + conics[g, 1] * dy)
                    entry[k, 1] += -d_power * (conics[g, 2] * dy + conics[g, 1] * dx)
                    entry[k, 2] += -0.5 * dx * dx * d_power
                    entry[k, 3] += -dx * dy * d_power
                    entry[k, 4] += -0.5 * dy * dy * d_power
    return entry


# -- screen-space preprocessing -----------------------------------------------

@dataclass
class Preprocessed:
    visible: np.ndarray
    means2d: np.ndarray
    depths: np.ndarray
    conics: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    radii: np.ndarray  # 3-sigma radius, pixels
    tile_radii: np.ndarray  # exact footprint where alpha' >= 1/255
    # backward intermediates
    t_cam: np.ndarray
    rotmats: np.ndarray
    unit_q: np.ndarray
    scales: np.ndarray
    cov3d: np.ndarray
    cov2d: np.ndarray
    view_dirs: np.ndarray
    view_dist: np.ndarray
    color_raw: np.ndarray


def preprocess(gaussians: GaussianSet, cam: Camera) -> Preprocessed:
    n = len(gaussians)
    dt = gaussians.centers.dtype if gaussians.centers.dtype in (np.float32, np.float64) else np.float64
    q_raw = gaussians.rotations.astype(np.float64)
    unit_q = q_raw / np.linalg.norm(q_raw, axis=1, keepdims=True) if n else q_raw
    rot = quaternion_to_rotmat(unit_q)
    scales = np.exp(gaussians.log_scales.astype(np.float64))
    m = rot * scales[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)
    centers = gaussians.centers.astype(np.float64)
    t = cam.to_camera(centers)
    visible = in_frustum(t, cam) if n else np.zeros(0, bool)
    t_safe = np.where(visible[:, None], t, np.array([0.0, 0.0, 1.0]))
    cov2 = screen_covariance(cov3d, t_safe, cam)
    conics, lam_max, det = conic_and_radius(cov2)
    visible &= det > 0
    means = np.stack([cam.fx * t_safe[:, 0] / t_safe[:, 2] + cam.cx,
                      cam.fy * t_safe[:, 1] / t_safe[:, 2] + cam.cy], axis=1)
    opac = sigmoid(gaussians.opacity_logits.astype(np.float64))
    rel = centers - cam.center
    dist = np.linalg.norm(rel, axis=1)
    dirs = rel / np.where(dist > 0, dist, 1.0)[:, None]
    basis = sh_basis(dirs, gaussians.sh_degree)
    color_raw = np.einsum("nk,nkc->nc", basis, gaussians.sh_coeffs.astype(np.float64)) + 0.5
    colors = np.maximum(color_raw, 0.0)
    lam = np.maximum(lam_max, 0.0)
    radii = np.where(visible, 3.0 * np.sqrt(lam), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        reach = 2.0 * np.log(255.0 * opac)
    contributes = visible & (reach > 0)
    tile_radii = np.where(contributes, np.sqrt(np.maximum(reach, 0.0) * lam) * (1 + 1e-6) + 1e-3, 0.0)
    return Preprocessed(
        visible=contributes, means2d=means.astype(dt), depths=t_safe[:, 2].astype(dt),
        conics=conics.astype(dt), colors=colors.astype(dt), opacities=opac.astype(dt),
        radii=radii, tile_radii=tile_radii, t_cam=t_safe, rotmats=rot, unit_q=unit_q, scales=scales,
        cov3d=cov3d, cov2d=cov2, view_dirs=dirs, view_dist=dist, color_raw=color_raw,
    )


def build_tiles(means2d, tile_radii, depths, visible, width, height):
    """Sorted (tile, depth, index) key list; returns (tile_ranges, gaussian ids)."""
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    idx = np.nonzero(visible)[0]
    u, v, r = means2d[idx, 0], means2d[idx, 1], tile_radii[idx]
    x0 = np.clip(np.floor(u - r), 0, width - 1)
    x1 = np.clip(np.ceil(u + r), 0, width - 1)
    y0 = np.clip(np.floor(v - r), 0, height - 1)
    y1 = np.clip(np.ceil(v + r), 0, height - 1)
    onscreen = (u + r >= 0) & (u - r <= width - 1) & (v + r >= 0) & (v - r <= height - 1)
    idx, x0, x1, y0, y1 = idx[onscreen], x0[onscreen], x1[onscreen], y0[onscreen], y1[onscreen]
    tx0, tx1 = (x0 // TILE).astype(np.int64), (x1 // TILE).astype(np.int64) + 1
    ty0, ty1 = (y0 // TILE).astype(np.int64), (y1 // TILE).astype(np.int64) + 1
    wdt = tx1 - tx0
    counts = wdt * (ty1 - ty0)
    total = int(counts.sum())
    gid = np.repeat(idx, counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    off = np.arange(total) - first
    w_rep = np.repeat(wdt, counts)
    tile_id = (np.repeat(ty0, counts) + off // w_rep) * tiles_x + np.repeat(tx0, counts) + off % w_rep
    order = np.lexsort((gid, depths[gid], tile_id))
    tile_id = tile_id[order]
    ids = gid[order].astype(np.int64)
    n_tiles = tiles_x * tiles_y
    bounds = np.searchsorted(tile_id, np.arange(n_tiles + 1))
    tile_ranges = np.stack([bounds[:-1], bounds[1:]], axis=1).astype(np.int64)
    return tile_ranges, ids, tiles_x


# -- public API ---------------------------------------------------------------

@dataclass
class RenderContext:
    """Everything the backward pass needs from one forward call."""

    camera: Camera
    background: np.ndarray
    pre: Preprocessed
    tile_ranges: np.ndarray
    ids: np.ndarray
    tiles_x: int
    t_final: np.ndarray
    weight_sum: np.ndarray
    n_contrib: np.ndarray
    sh_coeffs: np.ndarray
    q_raw: np.ndarray
    fingerprint: int
    n_gaussians: int


@dataclass
class RenderGradients:
    centers: np.ndarray
    rotations: np.ndarray  # w.r.t. the raw (unnormalized) quaternion
    scales: np.ndarray  # activated
    opacities: np.ndarray  # activated
    sh_coeffs: np.ndarray
    means2d: np.ndarray
    screen_grad_norm: np.ndarray
    hit: np.ndarray

    @classmethod
    def zeros(cls, n, k, dtype=np.float64):
        return cls(np.zeros((n, 3), dtype), np.zeros((n, 4), dtype), np.zeros((n, 3), dtype),
                   np.zeros(n, dtype), np.zeros((n, k, 3), dtype), np.zeros((n, 2), dtype),
                   np.zeros(n, dtype), np.zeros(n, bool))


def _fingerprint(g: GaussianSet) -> int:
    return hash((len(g), g.centers.tobytes(), g.opacity_logits.tobytes()))


def _check_background(background, cam):
    background = np.asarray(background)
    if background.shape != (cam.height, cam.width, 3):
        raise ValueError(f"background shape {background.shape} does not match camera "
                         f"({cam.height}, {cam.width}, 3)")
    return background


def rasterize_forward(gaussians: GaussianSet, cam: Camera, background):
    """Render ``gaussians`` over ``background``; returns (image, RenderContext)."""
    background = _check_background(background, cam)
    dt = gaussians.centers.dtype if gaussians.centers.dtype in (np.float32, np.float64) else np.float64
    bg = np.ascontiguousarray(background, dtype=dt)
    pre = preprocess(gaussians, cam)
    tile_ranges, ids, tiles_x = build_tiles(pre.means2d, pre.tile_radii, pre.depths, pre.visible,
                                            cam.width, cam.height)
    img, t_final, wsum, n_contrib = _forward_tiles(
        tile_ranges, ids, pre.means2d, pre.conics, pre.colors, pre.opacities, bg,
        cam.width, cam.height, tiles_x)
    ctx = RenderContext(cam, bg, pre, tile_ranges, ids, tiles_x, t_final, wsum, n_contrib,
                        gaussians.sh_coeffs.astype(np.float64), gaussians.rotations.astype(np.float64),
                        _fingerprint(gaussians), len(gaussians))
    return img, ctx


def render(gaussians: GaussianSet, cam: Camera, background):
    return rasterize_forward(gaussians, cam, background)[0]


def rasterize_brute_force(gaussians: GaussianSet, cam: Camera, background):
    """Oracle renderer: one global depth-sorted list, every pixel visits every
    Gaussian. Vectorized over pixels, sequential over Gaussians."""
    background = _check_background(background, cam)
    pre = preprocess(gaussians, cam)
    h, w = cam.height, cam.width
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    color = np.zeros((h, w, 3))
    T = np.ones((h, w))
    live = np.ones((h, w), bool)
    idx = np.nonzero(pre.visible)[0]
    order = idx[np.lexsort((idx, pre.depths[idx]))]
    for g in order:
        a, b, c = (float(x) for x in pre.conics[g])
        dx = float(pre.means2d[g, 0]) - px
        dy = float(pre.means2d[g, 1]) - py
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        alpha = np.minimum(0.99, float(pre.opacities[g]) * np.exp(power))
        use = live & (alpha >= ALPHA_MIN)
        test_t = T * (1.0 - alpha)
        stop = use & (test_t < T_MIN)
        live &= ~stop
        use &= ~stop
        wgt = np.where(use, alpha * T, 0.0)
        color += wgt[..., None] * pre.colors[g].astype(np.float64)
        T = np.where(use, test_t, T)
        if not live.any():
            break
    return color + T[..., None] * background


def rasterize_backward(ctx: RenderContext, grad_output, gaussians: GaussianSet | None = None):
    """Exact gradients of the forward map for an image-shaped upstream gradient."""
    cam = ctx.camera
    grad_output = np.asarray(grad_output)
    if grad_output.shape != (cam.height, cam.width, 3):
        raise ValueError(f"grad_output shape {grad_output.shape} does not match the render")
    if gaussians is not None and (len(gaussians) != ctx.n_gaussians or _fingerprint(gaussians) != ctx.fingerprint):
        raise StaleContextError("render context was produced for a different scene")
    pre = ctx.pre
    n = ctx.n_gaussians
    k = ctx.sh_coeffs.shape[1]
    out = RenderGradients.zeros(n, k)
    if n == 0 or ctx.ids.size == 0:
        return out
    entry = _backward_tiles(ctx.tile_ranges, ctx.ids, pre.means2d, pre.conics, pre.colors, pre.opacities,
                            ctx.background, ctx.t_final, ctx.n_contrib,
                            np.ascontiguousarray(grad_output, dtype=pre.means2d.dtype),
                            cam.width, cam.height, ctx.tiles_x)
    # fixed-order reduction keeps results independent of thread count
    per = np.stack([np.bincount(ctx.ids, weights=entry[:, c].astype(np.float64), minlength=n)
                    for c in range(9)], axis=1)
    d_mean, d_conic, d_color, d_opac = per[:, 0:2], per[:, 2:5], per[:, 5:8], per[:, 8]
    hit = np.zeros(n, bool)
    hit[ctx.ids] = True

    vis = pre.visible
    # conic -> screen covariance
    kmat = np.empty((n, 2, 2))
    kmat[:, 0, 0], kmat[:, 0, 1], kmat[:, 1, 0], kmat[:, 1, 1] = (
        pre.conics[:, 0], pre.conics[:, 1], pre.conics[:, 1], pre.conics[:, 2])
    gk = np.empty((n, 2, 2))
    gk[:, 0, 0], gk[:, 1, 1] = d_conic[:, 0], d_conic[:, 2]
    gk[:, 0, 1] = gk[:, 1, 0] = 0.5 * d_conic[:, 1]
    g_cov2 = -kmat @ gk @ kmat
    # screen covariance -> 3D covariance and projection Jacobian
    t = pre.t_cam
    jac = projection_jacobian(t, cam)
    tm = jac @ cam.rotation
    g_cov3 = np.swapaxes(tm, 1, 2) @ g_cov2 @ tm
    g_tm = 2.0 * g_cov2 @ tm @ pre.cov3d
    g_j = g_tm @ cam.rotation.T
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros((n, 3))
    g_t[:, 0] = -fx / tz**2 * g_j[:, 0, 2] + fx / tz * d_mean[:, 0]
    g_t[:, 1] = -fy / tz**2 * g_j[:, 1, 2] + fy / tz * d_mean[:, 1]
    g_t[:, 2] = (-fx / tz**2 * g_j[:, 0, 0] + 2 * fx * tx / tz**3 * g_j[:, 0, 2]
                 - fy / tz**2 * g_j[:, 1, 1] + 2 * fy * ty / tz**3 * g_j[:, 1, 2]
                 - fx * tx / tz**2 * d_mean[:, 0] - fy * ty / tz**2 * d_mean[:, 1])
    g_center = g_t @ cam.rotation
    # 3D covariance -> rotation and scale
    m = pre.rotmats * pre.scales[:, None, :]
    g_m = 2.0 * g_cov3 @ m
    g_scale = np.einsum("nij,nij->nj", pre.rotmats, g_m)
    g_rot = g_m * pre.scales[:, None, :]
    g_q = normalize_quaternion_grad(ctx.q_raw, rotmat_to_quaternion_grad(pre.unit_q, g_rot))
    # colour -> SH coefficients and view direction
    deg = int(round(math.sqrt(k))) - 1
    d_color = d_color * (pre.color_raw > 0)
    basis = sh_basis(pre.view_dirs, deg)
    g_sh = basis[:, :, None] * d_color[:, None, :]
    if deg > 0:
        g_dir = np.einsum("nkj,nk->nj", sh_basis_jacobian(pre.view_dirs, deg),
                          np.einsum("nkc,nc->nk", ctx.sh_coeffs, d_color))
        dirs = pre.view_dirs
        g_center += (g_dir - dirs * np.sum(dirs * g_dir, 1, keepdims=True)) / pre.view_dist[:, None]

    mask = vis[:, None]
    out.centers = np.where(mask, g_center, 0.0)
    out.rotations = np.where(mask, g_q, 0.0)
    out.scales = np.where(mask, g_scale, 0.0)
    out.opacities = np.where(vis, d_opac, 0.0)
    out.sh_coeffs = np.where(vis[:, None, None], g_sh, 0.0)
    out.means2d = np.where(mask, d_mean, 0.0)
    out.screen_grad_norm = np.linalg.norm(out.means2d, axis=1)
    out.hit = hit & vis
    return out


def unconstrained_grads(g: RenderGradients, gaussians: GaussianSet) -> dict:
    """Chain activated-attribute gradients to the stored parameters."""
    opac = gaussians.opacities
    return {
        "centers": g.centers,
        "rotations": g.rotations,
        "log_scales": g.scales * gaussians.scales,
        "opacity_logits": g.opacities * opac * (1.0 - opac),
        "sh_coeffs": g.sh_coeffs,
    }


# -- image output --------------------------------------------------------------

def to_uint8(image):
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """Binary P6 PPM, 8 bits per channel."""
    data = to_uint8(image)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary P6 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_f32(path, image):
    """Raw little-endian float32, planar (3, H, W)."""
    np.ascontiguousarray(np.transpose(image, (2, 0, 1)), dtype="<f4").tofile(path)


def read_f32(path, width, height):
    data = np.fromfile(path, dtype="<f4")
    if data.size != 3 * width * height:
        raise ValueError(f"{path}: expected {3 * width * height} floats, found {data.size}")
    return np.transpose(data.reshape(3, height, width), (1, 2, 0)).astype(np.float64)
