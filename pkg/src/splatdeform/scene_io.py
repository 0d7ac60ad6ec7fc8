"""Point clouds, datasets, the synthetic talking-aperture generator and
checkpoint files.

On-disk formats
---------------
* PLY: ASCII or binary little-endian, a single ``vertex`` element with
  scalar properties (x, y, z, optional red/green/blue, optional extras).
* Dataset directory: ``manifest.txt`` (``key = value`` lines),
  ``background.ppm``, ``frames/frame_NNNN.ppm`` with optional float32 planar
  sidecars (``.f32``), ``features.csv`` and ``canonical.ply``.
* Checkpoint: ``SPLD`` magic, u32 version, little-endian header, then raw
  float32 arrays (see :func:`checkpoint_save`).
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera, project_point
from .deform import DeformField, mask_bits, mask_from_bits
from .gaussians import GaussianSet, logit, rgb_to_sh_dc, sh_basis_count
from .rasterizer import (
    rasterize_brute_force,
    read_f32,
    read_ppm,
    write_f32,
    write_ppm,
)

EXPR_DIM = 6
MAX_POINTS = 100_000


class PlyError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# -- PLY -------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int",
              "u4": "uint", "f4": "float", "f8": "double"}


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray = None  # (N, 3) uint8
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (N, 3)")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")
        if self.colors is None:
            self.colors = np.full((len(self), 3), 255, np.uint8)
        self.colors = np.asarray(self.colors, dtype=np.uint8)

    def __len__(self):
        return self.positions.shape[0]


def _parse_header(fh):
    lines = []
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyError("missing 'ply' magic on line 1")
    fmt = None
    count = None
    props = []
    element = None
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PlyError(f"header not terminated (line {lineno})")
        parts = raw.decode("ascii", "replace").split()
        lines.append(parts)
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"unsupported format {' '.join(parts[1:])!r} (line {lineno})")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyError(f"malformed element line (line {lineno})")
            if parts[1] != "vertex":
                raise PlyError(f"unsupported element {parts[1]!r} (line {lineno})")
            element = parts[1]
            count = int(parts[2])
        elif parts[0] == "property":
            if element != "vertex":
                raise PlyError(f"property outside vertex element (line {lineno})")
            if len(parts) != 3 or parts[1] == "list":
                raise PlyError(f"unsupported property layout {' '.join(parts[1:])!r} (line {lineno})")
            if parts[1] not in _PLY_TYPES:
                raise PlyError(f"unknown property type {parts[1]!r} (line {lineno})")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise PlyError(f"unexpected header keyword {parts[0]!r} (line {lineno})")
    if fmt is None or count is None:
        raise PlyError("header lacks format or vertex element")
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex element lacks property {axis!r}")
    return fmt, count, props, lineno


def load_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        fmt, count, props, lineno = _parse_header(fh)
        offset = fh.tell()
        body = fh.read()
    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        need = count * dtype.itemsize
        if len(body) < need:
            raise PlyError(f"{path}: expected {need} bytes of vertex data at offset {offset}, "
                           f"found {len(body)}")
        data = np.frombuffer(body[:need], dtype=dtype)
        cols = {name: data[name] for name, _ in props}
    else:
        rows = body.decode("ascii", "replace").splitlines()
        rows = [r for r in rows if r.strip()]
        if len(rows) < count:
            raise PlyError(f"{path}: header declares {count} vertices but only {len(rows)} "
                           f"data lines follow (after line {lineno})")
        table = []
        for i, r in enumerate(rows[:count]):
            vals = r.split()
            if len(vals) != len(props):
                raise PlyError(f"{path}: line {lineno + 1 + i} has {len(vals)} values, expected {len(props)}")
            table.append(vals)
        cols = {}
        for j, (name, t) in enumerate(props):
            cols[name] = np.array([row[j] for row in table] if table else [], dtype=t)
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    colors = None
    if all(c in cols for c in ("red", "green", "blue")):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(np.uint8)
    extra = {k: np.array(v) for k, v in cols.items() if k not in ("x", "y", "z", "red", "green", "blue")}
    return PointCloud(np.array(pos), colors, extra)


def save_ply(pc: PointCloud, path, binary=True):
    n = len(pc)
    pos_t = "f4" if pc.positions.dtype == np.float32 else "f8"
    fields = [("x", pos_t), ("y", pos_t), ("z", pos_t),
              ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    for name, arr in pc.extra.items():
        fields.append((name, np.asarray(arr).dtype.str[1:]))
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {n}"]
    header += [f"property {_PLY_NAMES[t]} {name}" for name, t in fields]
    header.append("end_header")
    data = np.empty(n, dtype=[(name, "<" + t) for name, t in fields])
    for i, a in enumerate("xyz"):
        data[a] = pc.positions[:, i]
    for i, c in enumerate(("red", "green", "blue")):
        data[c] = pc.colors[:, i]
    for name, arr in pc.extra.items():
        data[name] = arr
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(v.item()) for v in row) + "\n").encode("ascii"))


def downsample_pointcloud(pc: PointCloud, max_points=MAX_POINTS, seed=0) -> PointCloud:
    """Seeded uniform subsample without replacement down to ``max_points``."""
    if max_points < 1:
        raise ValueError("max_points must be >= 1")
    n = len(pc)
    if n <= max_points:
        return pc
    keep = np.sort(np.random.default_rng(seed).choice(n, size=max_points, replace=False))
    return PointCloud(pc.positions[keep], pc.colors[keep], {k: v[keep] for k, v in pc.extra.items()})


def init_gaussians_from_cloud(pc: PointCloud, embedding_dim=32, seed=0, sh_degree=1,
                              default_scale=0.01, init_opacity=0.1, embedding_std=0.01) -> GaussianSet:
    """Isotropic Gaussians at the points, sized by mean distance to 3 neighbours."""
    pos = np.asarray(pc.positions, dtype=np.float64)
    n = len(pos)
    if n < 1:
        raise ValueError("point cloud is empty")
    if n == 1:
        scale = np.full(n, default_scale)
    else:
        k = min(3, n - 1)
        dist, _ = cKDTree(pos).query(pos, k=k + 1)
        scale = np.asarray(dist).reshape(n, k + 1)[:, 1:].mean(axis=1)
        scale = np.where(scale > 0, scale, default_scale)
    sh = np.zeros((n, sh_basis_count(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh_dc(pc.colors.astype(np.float64) / 255.0)
    rng = np.random.default_rng(seed)
    return GaussianSet(
        centers=pos.copy(),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        opacity_logits=np.full(n, float(logit(init_opacity))),
        sh_coeffs=sh,
        embeddings=rng.normal(0.0, embedding_std, size=(n, embedding_dim)),
    )


# -- manifest and dataset ----------------------------------------------------------------

def read_keyvalue(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_keyvalue(path, items: dict):
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k} = {v}\n")


def camera_to_manifest(cam: Camera) -> dict:
    out = {f"camera.{k}": repr(float(getattr(cam, k))) for k in ("fx", "fy", "cx", "cy", "near", "far")}
    for i, row in enumerate(cam.w2c):
        out[f"camera.w2c.{i}"] = " ".join(repr(float(v)) for v in row)
    return out


def camera_from_manifest(m: dict) -> Camera:
    w2c = np.array([[float(v) for v in m[f"camera.w2c.{i}"].split()] for i in range(3)])
    return Camera(w2c[:, :3], w2c[:, 3], float(m["camera.fx"]), float(m["camera.fy"]),
                  float(m["camera.cx"]), float(m["camera.cy"]), int(m["width"]), int(m["height"]),
                  float(m.get("camera.near", 0.01)), float(m.get("camera.far", 100.0)))


def split_indices(n_frames: int, ratio: int = 10):
    """Every (ratio+1)-th frame is held out: 220 frames -> 200 train / 20 test."""
    idx = np.arange(n_frames)
    test = idx % (ratio + 1) == ratio
    return idx[~test], idx[test]


@dataclass
class FrameDataset:
    images: np.ndarray  # (F, H, W, 3)
    audio: np.ndarray  # (F, D_a)
    expr: np.ndarray  # (F, 6)
    mouth_rects: np.ndarray  # (F, 4) as x0, y0, x1, y1
    camera: Camera
    background: np.ndarray
    split_ratio: int = 10
    root: Path | None = None

    def __post_init__(self):
        f = self.images.shape[0]
        for name in ("audio", "expr", "mouth_rects"):
            if getattr(self, name).shape[0] != f:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows for {f} frames")

    def __len__(self):
        return self.images.shape[0]

    @property
    def audio_dim(self):
        return self.audio.shape[1]

    @property
    def train_indices(self):
        return split_indices(len(self), self.split_ratio)[0]

    @property
    def test_indices(self):
        return split_indices(len(self), self.split_ratio)[1]


def _fmt(v) -> str:
    return repr(float(v))


def write_features(path, audio, expr, rects):
    d_a = audio.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + [f"a_{i}" for i in range(d_a)] + [f"e_{i}" for i in range(expr.shape[1])]
                   + ["mouth_x0", "mouth_y0", "mouth_x1", "mouth_y1"])
        for n in range(audio.shape[0]):
            w.writerow([n] + [_fmt(v) for v in audio[n]] + [_fmt(v) for v in expr[n]]
                       + [int(v) for v in rects[n]])


def read_features(path, d_a):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    a_cols = [header.index(f"a_{i}") for i in range(d_a)]
    e_cols = [header.index(f"e_{i}") for i in range(EXPR_DIM)]
    r_cols = [header.index(c) for c in ("mouth_x0", "mouth_y0", "mouth_x1", "mouth_y1")]
    audio = np.array([[float(r[c]) for c in a_cols] for r in body]).reshape(len(body), d_a)
    expr = np.array([[float(r[c]) for c in e_cols] for r in body]).reshape(len(body), EXPR_DIM)
    rects = np.array([[int(r[c]) for c in r_cols] for r in body], dtype=np.int64).reshape(len(body), 4)
    return audio, expr, rects


def frame_path(root, n, ext=".ppm"):
    return Path(root) / "frames" / f"frame_{n:04d}{ext}"


def save_dataset(ds: FrameDataset, root, float_sidecar=True, extra_manifest=None):
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    h, w = ds.images.shape[1:3]
    manifest = {"frames": len(ds), "width": w, "height": h, "d_a": ds.audio_dim,
                "split_ratio": ds.split_ratio, "background": "background.ppm",
                **camera_to_manifest(ds.camera), "features": "features.csv"}
    manifest.update(extra_manifest or {})
    write_ppm(root / "background.ppm", ds.background)
    if float_sidecar:
        write_f32(root / "background.f32", ds.background)
    for n in range(len(ds)):
        write_ppm(frame_path(root, n), ds.images[n])
        if float_sidecar:
            write_f32(frame_path(root, n, ".f32"), ds.images[n])
    write_features(root / "features.csv", ds.audio, ds.expr, ds.mouth_rects)
    write_keyvalue(root / "manifest.txt", manifest)


def load_dataset(root) -> FrameDataset:
    root = Path(root)
    if not (root / "manifest.txt").exists():
        raise FileNotFoundError(f"{root}: no manifest.txt")
    m = read_keyvalue(root / "manifest.txt")
    w, h, f, d_a = int(m["width"]), int(m["height"]), int(m["frames"]), int(m["d_a"])

    def image(ppm: Path):
        side = ppm.with_suffix(".f32")
        return read_f32(side, w, h) if side.exists() else read_ppm(ppm)

    bg = image(root / m["background"])
    images = np.stack([image(frame_path(root, n)) for n in range(f)]) if f else np.zeros((0, h, w, 3))
    audio, expr, rects = read_features(root / m.get("features", "features.csv"), d_a)
    if audio.shape[0] != f:
        raise ValueError(f"{root}: features.csv has {audio.shape[0]} rows for {f} frames")
    return FrameDataset(images, audio, expr, rects, camera_from_manifest(m), bg,
                        int(m.get("split_ratio", 10)), root)


# -- synthetic talking-aperture scene ------------------------------------------------------

GROUP_FACE, GROUP_UPPER_LIP, GROUP_LOWER_LIP, GROUP_BROW = 0, 1, 2, 3


@dataclass
class SynthConfig:
    frames: int = 220
    width: int = 64
    height: int = 64
    d_a: int = 8
    seed: int = 0
    driver: str = "smooth"  # smooth | zero | ramp
    gap: float = 0.28  # maximum lip gap, world units
    spacing: float = 0.035
    face_radius: float = 0.75
    depth: float = 2.5
    focal: float = 72.0
    mouth_y: float = 0.35
    brow_y: float = -0.33
    brow_amplitude: float = 0.06
    gt_opacity: float = 0.8
    split_ratio: int = 10

    def validate(self):
        if self.frames < 2 * (self.split_ratio + 1):
            raise ValueError(f"frame count {self.frames} too small for a {self.split_ratio}:1 split "
                             f"(need >= {2 * (self.split_ratio + 1)})")
        if self.driver not in ("smooth", "zero", "ramp"):
            raise ValueError(f"unknown driver {self.driver!r}")
        if self.width < 16 or self.height < 16:
            raise ValueError("synthetic images must be at least 16x16")


def lip_gap(a1, cfg: SynthConfig):
    """Vertical opening between the lips (world units) for audio channel a_1."""
    return cfg.gap * (0.5 + 0.5 * np.asarray(a1))


def _band_limited(rng, n, channels, lo=2.0, hi=8.0, terms=3):
    t = np.arange(n) / max(n, 1)
    out = np.zeros((n, channels))
    for c in range(channels):
        for _ in range(terms):
            f = rng.uniform(lo, hi)
            out[:, c] += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        out[:, c] /= max(np.max(np.abs(out[:, c])), 1e-12)
    return out


def synth_drivers(cfg: SynthConfig):
    """(audio (F, D_a), expression (F, 6)); a_1 is audio column 0, the brow
    action unit is expression column 0."""
    rng = np.random.default_rng(cfg.seed)
    f = cfg.frames
    if cfg.driver == "zero":
        return np.zeros((f, cfg.d_a)), np.zeros((f, EXPR_DIM))
    if cfg.driver == "ramp":
        audio = np.zeros((f, cfg.d_a))
        audio[:, 0] = np.linspace(-0.6, 1.0, f)
        return audio, np.zeros((f, EXPR_DIM))
    audio = _band_limited(rng, f, cfg.d_a)
    expr = 2.5 + 2.5 * _band_limited(rng, f, EXPR_DIM, lo=1.0, hi=4.0)
    return audio, expr


def synth_background(cfg: SynthConfig):
    h, w = cfg.height, cfg.width
    y, x = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    bg = np.stack([0.12 + 0.10 * y, 0.16 + 0.06 * x, 0.30 - 0.08 * y], axis=-1)
    torso = np.exp(-((x - 0.5) ** 2 / 0.08 + (y - 1.05) ** 2 / 0.02))
    return np.clip(bg + torso[..., None] * np.array([0.10, 0.12, 0.18]), 0.0, 1.0)


def _grid(x0, x1, y0, y1, s):
    xs = np.arange(x0, x1 + 1e-9, s)
    ys = np.arange(y0, y1 + 1e-9, s)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def synth_canonical_scene(cfg: SynthConfig):
    """Ground-truth Gaussians at the mean pose (a_1 = 0, brow unit = 2.5).

    Returns (GaussianSet, group ids)."""
    s = cfg.spacing
    r = cfg.face_radius
    g_mid = float(lip_gap(0.0, cfg))
    hole_hw = 0.22
    hole_hh = cfg.gap / 2 + s
    lip_hw = hole_hw + s
    slab_h = cfg.gap / 2 + 2 * s
    pts, groups, colors, depth_off = [], [], [], []

    face = _grid(-r, r, -r, r, s)
    inside = np.hypot(face[:, 0], face[:, 1]) <= r
    hole = (np.abs(face[:, 0]) <= hole_hw) & (np.abs(face[:, 1] - cfg.mouth_y) <= hole_hh)
    face = face[inside & ~hole]
    rr = np.hypot(face[:, 0], face[:, 1]) / r
    shade = 1.0 - 0.18 * rr ** 2
    fc = np.stack([0.92 * shade, 0.72 * shade, 0.58 * shade + 0.05 * face[:, 0]], axis=1)
    pts.append(face)
    groups.append(np.full(len(face), GROUP_FACE))
    colors.append(fc)
    depth_off.append(0.2 * rr ** 2)

    n_rows = int(round(slab_h / s))
    xs = np.arange(-lip_hw, lip_hw + 1e-9, s)
    for grp, sign, col in ((GROUP_UPPER_LIP, -1.0, (0.75, 0.20, 0.25)), (GROUP_LOWER_LIP, 1.0, (0.80, 0.28, 0.32))):
        ys = cfg.mouth_y + sign * (g_mid / 2 + s / 2 + s * np.arange(n_rows))
        gx, gy = np.meshgrid(xs, ys)
        lip = np.stack([gx.ravel(), gy.ravel()], axis=1)
        pts.append(lip)
        groups.append(np.full(len(lip), grp))
        colors.append(np.tile(col, (len(lip), 1)))
        depth_off.append(np.full(len(lip), -0.02))

    for cx in (-0.28, 0.28):
        brow = _grid(cx - 0.1, cx + 0.1, cfg.brow_y - s / 2, cfg.brow_y + s / 2, s)
        pts.append(brow)
        groups.append(np.full(len(brow), GROUP_BROW))
        colors.append(np.tile((0.30, 0.20, 0.15), (len(brow), 1)))
        depth_off.append(np.full(len(brow), -0.02))

    xy = np.concatenate(pts)
    z = cfg.depth + np.concatenate(depth_off)
    centers = np.column_stack([xy, z])
    colors = np.clip(np.concatenate(colors), 0.0, 1.0)
    scene = GaussianSet.from_activated(centers, 0.6 * s, cfg.gt_opacity, colors=colors, sh_degree=0)
    return scene, np.concatenate(groups).astype(np.int32)


def synth_deform(scene: GaussianSet, groups, a, e, cfg: SynthConfig) -> GaussianSet:
    """Analytic per-frame motion: lips open with a_1, brows rise with e_0."""
    out = scene.copy()
    half = 0.5 * (float(lip_gap(a[0], cfg)) - float(lip_gap(0.0, cfg)))
    out.centers[groups == GROUP_UPPER_LIP, 1] -= half
    out.centers[groups == GROUP_LOWER_LIP, 1] += half
    out.centers[groups == GROUP_BROW, 1] -= cfg.brow_amplitude * (float(e[0]) - 2.5) / 2.5
    return out


def synth_camera(cfg: SynthConfig) -> Camera:
    return Camera.simple(cfg.width, cfg.height, cfg.focal)


def mouth_rect(scene: GaussianSet, groups, cam: Camera, pad=2):
    lips = scene.centers[(groups == GROUP_UPPER_LIP) | (groups == GROUP_LOWER_LIP)]
    uv = np.array([project_point(p, cam)[:2] for p in lips])
    x0 = max(int(np.floor(uv[:, 0].min())) - pad, 0)
    y0 = max(int(np.floor(uv[:, 1].min())) - pad, 0)
    x1 = min(int(np.ceil(uv[:, 0].max())) + pad + 1, cam.width)
    y1 = min(int(np.ceil(uv[:, 1].max())) + pad + 1, cam.height)
    return np.array([x0, y0, x1, y1], dtype=np.int64)


def measure_aperture_gap(image, background, rect, tol=0.5, inner=0.6):
    """Column-averaged count of mouth-rectangle rows where the background
    shows through, over the central ``inner`` fraction of columns.

    Each pixel counts fractionally, 1 - max|image - background| / tol clipped
    to [0, 1], so the measure stays continuous while the lips' blurred edges
    still overlap. ``tol`` sits just below the lip/plate colour contrast."""
    x0, y0, x1, y1 = (int(v) for v in rect)
    w = x1 - x0
    trim = int(round(w * (1 - inner) / 2))
    cols = slice(x0 + trim, x1 - trim)
    diff = np.max(np.abs(np.asarray(image)[y0:y1, cols] - np.asarray(background)[y0:y1, cols]), axis=-1)
    visible = np.clip(1.0 - diff / tol, 0.0, 1.0)
    return float(visible.sum(axis=0).mean())


@dataclass
class SynthResult:
    dataset: FrameDataset
    point_cloud: PointCloud
    scene: GaussianSet
    groups: np.ndarray
    config: SynthConfig


def render_synth_frame(scene, groups, a, e, cfg: SynthConfig, cam=None, background=None):
    cam = cam or synth_camera(cfg)
    bg = synth_background(cfg) if background is None else background
    return rasterize_brute_force(synth_deform(scene, groups, a, e, cfg), cam, bg)


def synth_scene_generate(cfg: SynthConfig = None, out_dir=None) -> SynthResult:
    """Build the ground-truth scene, render every frame with the oracle
    renderer and optionally write the dataset directory."""
    cfg = cfg or SynthConfig()
    cfg.validate()
    scene, groups = synth_canonical_scene(cfg)
    cam = synth_camera(cfg)
    bg = synth_background(cfg)
    audio, expr = synth_drivers(cfg)
    images = np.empty((cfg.frames, cfg.height, cfg.width, 3))
    rects = np.empty((cfg.frames, 4), dtype=np.int64)
    for n in range(cfg.frames):
        posed = synth_deform(scene, groups, audio[n], expr[n], cfg)
        images[n] = rasterize_brute_force(posed, cam, bg)
        rects[n] = mouth_rect(posed, groups, cam)
    colors = np.clip(np.round((0.28209479177387814 * scene.sh_coeffs[:, 0, :] + 0.5) * 255), 0, 255)
    pc = PointCloud(scene.centers.copy(), colors.astype(np.uint8))
    ds = FrameDataset(images, audio, expr, rects, cam, bg, cfg.split_ratio)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(ds, out, extra_manifest={"point_cloud": "canonical.ply", "gt_scene": "gt_scene.ply"})
        ds.root = out
        save_ply(pc, out / "canonical.ply")
        gt = PointCloud(scene.centers.copy(), pc.colors, {
            "f_dc_0": scene.sh_coeffs[:, 0, 0].copy(), "f_dc_1": scene.sh_coeffs[:, 0, 1].copy(),
            "f_dc_2": scene.sh_coeffs[:, 0, 2].copy(), "log_scale": scene.log_scales[:, 0].copy(),
            "opacity_logit": scene.opacity_logits.copy(), "group": groups.astype(np.int32)})
        save_ply(gt, out / "gt_scene.ply")
        write_keyvalue(out / "synth.txt", {k: v for k, v in cfg.__dict__.items()})
    return SynthResult(ds, pc, scene, groups, cfg)


def load_synth_config(path) -> SynthConfig:
    kv = read_keyvalue(path)
    cfg = SynthConfig()
    for k, v in kv.items():
        if not hasattr(cfg, k):
            raise ValueError(f"{path}: unknown synth key {k!r}")
        cur = getattr(cfg, k)
        setattr(cfg, k, type(cur)(v) if not isinstance(cur, bool) else v.lower() in ("1", "true", "yes"))
    return cfg


def load_gt_scene(path):
    pc = load_ply(path)
    n = len(pc)
    sh = np.zeros((n, 1, 3))
    for c in range(3):
        sh[:, 0, c] = pc.extra[f"f_dc_{c}"]
    scene = GaussianSet(pc.positions.astype(np.float64), np.tile([1.0, 0, 0, 0], (n, 1)),
                        np.repeat(pc.extra["log_scale"][:, None], 3, axis=1).astype(np.float64),
                        pc.extra["opacity_logit"].astype(np.float64), sh)
    return scene, pc.extra["group"].astype(np.int32)


# -- checkpoints -----------------------------------------------------------------------

CKPT_MAGIC = b"SPLD"
CKPT_VERSION = 1
_HEAD = struct.Struct("<IIIIIIIIIQQ")  # N, d, D_z, D_a, D_e, z_freqs, e_freqs, include_input, mask, seed, iteration


@dataclass
class Checkpoint:
    gaussians: GaussianSet
    field: DeformField
    iteration: int = 0
    seed: int = 0


def _ckpt_arrays(ck: Checkpoint):
    g = ck.gaussians
    out = [g.centers, g.rotations, g.log_scales, g.opacity_logits, g.sh_coeffs, g.embeddings]
    out += [ck.field.params[k] for k in ck.field.param_names()]
    return out


def checkpoint_header(ck: Checkpoint) -> bytes:
    g, f = ck.gaussians, ck.field
    dims = f.layer_dims
    head = _HEAD.pack(len(g), g.sh_degree, g.embedding_dim, f.audio_dim, f.expr_dim, f.enc_z.n_freqs,
                      f.enc_e.n_freqs, int(f.enc_z.include_input), mask_bits(f.mask), ck.seed, ck.iteration)
    return (CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + head
            + struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims))


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(checkpoint_header(ck))
    for arr in _ckpt_arrays(ck):
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def checkpoint_save(ck: Checkpoint, path):
    """Atomic write (temp file in the target directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(ck)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


def checkpoint_load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    return checkpoint_from_bytes(raw, str(path))


def checkpoint_from_bytes(raw: bytes, name="checkpoint") -> Checkpoint:
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{name}: bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(raw) < 8 + _HEAD.size + 4:
        raise CheckpointError(f"{name}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{name}: unsupported version {version} (expected {CKPT_VERSION})")
    n, d, dz, da, de, zf, ef, inc, bits, seed, it = _HEAD.unpack_from(raw, 8)
    off = 8 + _HEAD.size
    (ndims,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + 4 * ndims:
        raise CheckpointError(f"{name}: truncated header")
    dims = struct.unpack_from(f"<{ndims}I", raw, off)
    off += 4 * ndims
    field = DeformField(embedding_dim=dz, audio_dim=da, expr_dim=de, sh_degree=d, hidden=dims[1],
                        z_freqs=zf, e_freqs=ef, include_input=bool(inc), mask=mask_from_bits(bits), seed=seed)
    if field.layer_dims != tuple(dims):
        raise CheckpointError(f"{name}: layer dims {dims} inconsistent with header fields")
    k = sh_basis_count(d)
    shapes = [(n, 3), (n, 4), (n, 3), (n,), (n, k, 3), (n, dz)]
    shapes += [field.params[p].shape for p in field.param_names()]
    expected = 4 * sum(int(np.prod(s)) for s in shapes)
    actual = len(raw) - off
    if actual != expected:
        raise CheckpointError(f"{name}: payload size mismatch, expected {expected} bytes, found {actual}")
    arrays = []
    for s in shapes:
        cnt = int(np.prod(s))
        arrays.append(np.frombuffer(raw, dtype="<f4", count=cnt, offset=off).reshape(s).astype(np.float32))
        off += 4 * cnt
    g = GaussianSet(*arrays[:6])
    for name_, arr in zip(field.param_names(), arrays[6:]):
        field.params[name_] = arr
    return Checkpoint(g, field, int(it), int(seed))
