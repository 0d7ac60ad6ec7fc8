"""Canonical Gaussian primitives: parameter storage, activations, covariance,
density and spherical-harmonic colour."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit
from scipy.special import logit as _logit

COV_EPS = 1e-9

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


class InvalidInputError(ValueError):
    pass


class DegenerateCovarianceError(ValueError):
    pass


def sh_basis_count(degree: int) -> int:
    return (degree + 1) ** 2


def degree_from_basis_count(k: int) -> int:
    d = int(round(np.sqrt(k))) - 1
    if (d + 1) ** 2 != k or not 0 <= d <= 3:
        raise ValueError(f"{k} is not a valid SH coefficient count")
    return d


# -- activations --------------------------------------------------------------

sigmoid = expit
logit = _logit


def rgb_to_sh_dc(rgb):
    """Inverse of the degree-0 colour convention (``C0 * f + 0.5``)."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_dc_to_rgb(dc):
    return SH_C0 * np.asarray(dc) + 0.5


@dataclass
class GaussianSet:
    """Structure-of-arrays Gaussian scene in unconstrained parameters.

    ``sh_coeffs`` has shape (N, (d+1)**2, 3): basis index first, colour
    channel last.
    """

    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    embeddings: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.centers.shape[0]
        if self.embeddings is None:
            self.embeddings = np.zeros((n, 0), dtype=self.centers.dtype)
        shapes = {
            "centers": (self.centers, (n, 3)),
            "rotations": (self.rotations, (n, 4)),
            "log_scales": (self.log_scales, (n, 3)),
            "opacity_logits": (self.opacity_logits, (n,)),
        }
        for name, (arr, shape) in shapes.items():
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise ValueError(f"sh_coeffs has shape {self.sh_coeffs.shape}, expected (N, K, 3)")
        degree_from_basis_count(self.sh_coeffs.shape[1])
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise ValueError(f"embeddings has shape {self.embeddings.shape}, expected (N, D)")

    ARRAY_FIELDS = ("centers", "rotations", "log_scales", "opacity_logits", "sh_coeffs", "embeddings")

    def __len__(self):
        return self.centers.shape[0]

    @property
    def sh_degree(self) -> int:
        return degree_from_basis_count(self.sh_coeffs.shape[1])

    @property
    def embedding_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def unit_rotations(self):
        return normalize_quaternions(self.rotations)

    @classmethod
    def empty(cls, sh_degree=1, embedding_dim=32, dtype=np.float64):
        k = sh_basis_count(sh_degree)
        return cls(
            centers=np.zeros((0, 3), dtype),
            rotations=np.zeros((0, 4), dtype),
            log_scales=np.zeros((0, 3), dtype),
            opacity_logits=np.zeros((0,), dtype),
            sh_coeffs=np.zeros((0, k, 3), dtype),
            embeddings=np.zeros((0, embedding_dim), dtype),
        )

    @classmethod
    def from_activated(cls, centers, scales, opacities, colors=None, rotations=None,
                       sh_degree=1, embeddings=None, sh_coeffs=None):
        """Build a set from positive scales, opacities in (0, 1) and RGB colours."""
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        n = centers.shape[0]
        scales = np.asarray(scales, dtype=np.float64)
        if scales.ndim == 1:
            # per-Gaussian isotropic
            scales = scales[:, None]
        scales = np.broadcast_to(scales, (n, 3)).copy()
        opac = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,)).copy()
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if sh_coeffs is None:
            sh_coeffs = np.zeros((n, sh_basis_count(sh_degree), 3))
            if colors is not None:
                sh_coeffs[:, 0, :] = rgb_to_sh_dc(np.broadcast_to(colors, (n, 3)))
        if embeddings is None:
            embeddings = np.zeros((n, 0))
        return cls(centers, np.asarray(rotations, float).copy(), np.log(scales), logit(opac),
                   np.asarray(sh_coeffs, float).copy(), np.asarray(embeddings, float).copy())

    def copy(self) -> "GaussianSet":
        return replace(self, **{f: getattr(self, f).copy() for f in self.ARRAY_FIELDS})

    def astype(self, dtype) -> "GaussianSet":
        return replace(self, **{f: getattr(self, f).astype(dtype) for f in self.ARRAY_FIELDS})

    def subset(self, idx) -> "GaussianSet":
        return replace(self, **{f: getattr(self, f)[idx].copy() for f in self.ARRAY_FIELDS})

    def concat(self, other: "GaussianSet") -> "GaussianSet":
        return replace(self, **{f: np.concatenate([getattr(self, f), getattr(other, f)])
                                for f in self.ARRAY_FIELDS})

    def arrays(self) -> dict:
        return {f: getattr(self, f) for f in self.ARRAY_FIELDS}

    def equals(self, other: "GaussianSet") -> bool:
        """Bitwise equality of every array."""
        return all(
            getattr(self, f).shape == getattr(other, f).shape
            and getattr(self, f).tobytes() == getattr(other, f).tobytes()
            for f in self.ARRAY_FIELDS
        )


# -- rotations and covariance -------------------------------------------------

def normalize_quaternions(q):
    q = np.asarray(q, dtype=np.float64) if not isinstance(q, np.ndarray) else q
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_rotmat(q):
    """(..., 4) unit quaternions (w, x, y, z) -> (..., 3, 3) rotation matrices."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_to_quaternion_grad(q, grad_r):
    """Backprop dL/dR (..., 3, 3) to dL/dq for unit q, treated as free variables."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = grad_r
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def normalize_quaternion_grad(q_raw, grad_unit):
    """Backprop through q / |q|."""
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    qn = q_raw / norm
    return (grad_unit - qn * np.sum(qn * grad_unit, axis=-1, keepdims=True)) / norm


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("non-finite input component")


def covariance_from_rotation_scale(q, s):
    """Sigma = R S S^T R^T for a unit quaternion and positive scales.

    Accepts a single Gaussian ((4,), (3,)) or a batch ((N, 4), (N, 3)) and
    returns full (…, 3, 3) matrices.
    """
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    _check_finite(q, s)
    r = quaternion_to_rotmat(normalize_quaternions(q))
    m = r * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def covariance_to_upper(cov):
    """(…, 3, 3) -> (…, 6) as (xx, xy, xz, yy, yz, zz)."""
    iu = np.triu_indices(3)
    return cov[..., iu[0], iu[1]]


def covariance_from_upper(c6):
    c6 = np.asarray(c6, dtype=np.float64)
    out = np.empty(c6.shape[:-1] + (3, 3))
    iu = np.triu_indices(3)
    out[..., iu[0], iu[1]] = c6
    out[..., iu[1], iu[0]] = c6
    return out


def eval_density(x, mu, cov):
    """exp(-0.5 (x - mu)^T Sigma^-1 (x - mu)) with a small diagonal regularizer."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape[-1] == 6:
        cov = covariance_from_upper(cov)
    _check_finite(x, mu, cov)
    reg = cov + COV_EPS * np.eye(3)
    det = np.linalg.det(reg)
    if not np.all(np.abs(det) > 1e-300):
        raise DegenerateCovarianceError("covariance is singular after regularization")
    d = x - mu
    maha = np.einsum("...i,...i->...", d, np.linalg.solve(reg, d[..., None])[..., 0])
    return np.exp(-0.5 * maha)


# -- spherical harmonics ------------------------------------------------------

def sh_basis(dirs, degree):
    """Real SH basis values (N, (d+1)**2) in the 3DGS sign convention."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    k = sh_basis_count(degree)
    b = np.empty(dirs.shape[:-1] + (k,), dtype=dirs.dtype)
    b[..., 0] = SH_C0
    if degree > 0:
        b[..., 1] = -SH_C1 * y
        b[..., 2] = SH_C1 * z
        b[..., 3] = -SH_C1 * x
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        b[..., 4] = SH_C2[0] * x * y
        b[..., 5] = SH_C2[1] * y * z
        b[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        b[..., 7] = SH_C2[3] * x * z
        b[..., 8] = SH_C2[4] * (xx - yy)
    if degree > 2:
        b[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        b[..., 10] = SH_C3[1] * x * y * z
        b[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        b[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        b[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        b[..., 14] = SH_C3[5] * z * (xx - yy)
        b[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return b


def sh_basis_jacobian(dirs, degree):
    """d basis / d dir, shape (N, (d+1)**2, 3)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    k = sh_basis_count(degree)
    j = np.zeros(dirs.shape[:-1] + (k, 3), dtype=dirs.dtype)
    if degree > 0:
        j[..., 1, 1] = -SH_C1
        j[..., 2, 2] = SH_C1
        j[..., 3, 0] = -SH_C1
    if degree > 1:
        j[..., 4, 0] = SH_C2[0] * y
        j[..., 4, 1] = SH_C2[0] * x
        j[..., 5, 1] = SH_C2[1] * z
        j[..., 5, 2] = SH_C2[1] * y
        j[..., 6, 0] = -2 * SH_C2[2] * x
        j[..., 6, 1] = -2 * SH_C2[2] * y
        j[..., 6, 2] = 4 * SH_C2[2] * z
        j[..., 7, 0] = SH_C2[3] * z
        j[..., 7, 2] = SH_C2[3] * x
        j[..., 8, 0] = 2 * SH_C2[4] * x
        j[..., 8, 1] = -2 * SH_C2[4] * y
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        j[..., 9, 0] = SH_C3[0] * 6 * x * y
        j[..., 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        j[..., 10, 0] = SH_C3[1] * y * z
        j[..., 10, 1] = SH_C3[1] * x * z
        j[..., 10, 2] = SH_C3[1] * x * y
        j[..., 11, 0] = SH_C3[2] * (-2 * x * y)
        j[..., 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        j[..., 11, 2] = SH_C3[2] * 8 * y * z
        j[..., 12, 0] = SH_C3[3] * (-6 * x * z)
        j[..., 12, 1] = SH_C3[3] * (-6 * y * z)
        j[..., 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        j[..., 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        j[..., 13, 1] = SH_C3[4] * (-2 * x * y)
        j[..., 13, 2] = SH_C3[4] * 8 * x * z
        j[..., 14, 0] = SH_C3[5] * 2 * x * z
        j[..., 14, 1] = SH_C3[5] * (-2 * y * z)
        j[..., 14, 2] = SH_C3[5] * (xx - yy)
        j[..., 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
        j[..., 15, 1] = SH_C3[6] * (-6 * x * y)
    return j


def eval_sh_color(f, view_dir, degree):
    """RGB colour for one Gaussian (or a batch).

    ``f`` is (K, 3) or flat with length 3K, or batched (N, K, 3). The result
    is ``sum_k basis_k * f_k + 0.5`` clamped at zero.
    """
    f = np.asarray(f, dtype=np.float64)
    k = sh_basis_count(degree)
    if f.ndim == 1:
        if f.size != 3 * k:
            raise ValueError(f"expected {3 * k} SH coefficients for degree {degree}, got {f.size}")
        f = f.reshape(k, 3)
    if f.shape[-2:] != (k, 3):
        raise ValueError(f"SH coefficients of shape {f.shape} do not match degree {degree}")
    d = np.asarray(view_dir, dtype=np.float64)
    basis = sh_basis(d, degree)
    rgb = np.einsum("...k,...kc->...c", basis, f) + 0.5
    return np.maximum(rgb, 0.0)
