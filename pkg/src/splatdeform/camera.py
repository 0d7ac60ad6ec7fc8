"""Pinhole camera, world->screen transforms and screen-space covariance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DILATION = 0.3
FRUSTUM_MARGIN = 1.3


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    """World-to-camera rigid transform plus pinhole intrinsics.

    Camera space follows the OpenCV convention: +z forward, +x right, +y down.
    Pixel ``(i, j)`` is sampled at screen coordinate ``(i, j)``.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise ValueError("camera rotation must be orthonormal with det +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("require 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @classmethod
    def simple(cls, width, height, fx, fy=None, rotation=None, translation=None, **kw):
        """Camera with the principal point at the image centre."""
        return cls(
            rotation=np.eye(3) if rotation is None else rotation,
            translation=np.zeros(3) if translation is None else translation,
            fx=fx, fy=fx if fy is None else fy,
            cx=width / 2.0, cy=height / 2.0,
            width=width, height=height, **kw,
        )

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    @property
    def w2c(self):
        """3x4 [R | t] matrix."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def to_camera(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def rolled(self, theta):
        """Same camera rotated by ``theta`` about its optical axis."""
        c, s = np.cos(theta), np.sin(theta)
        rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return Camera(rz @ self.rotation, rz @ self.translation, self.fx, self.fy, self.cx, self.cy,
                      self.width, self.height, self.near, self.far)

    def x_limits(self):
        return (-FRUSTUM_MARGIN * self.cx / self.fx, FRUSTUM_MARGIN * (self.width - self.cx) / self.fx)

    def y_limits(self):
        return (-FRUSTUM_MARGIN * self.cy / self.fy, FRUSTUM_MARGIN * (self.height - self.cy) / self.fy)


@dataclass
class ProjectedGaussian:
    mean: np.ndarray  # (u, v) pixels
    depth: float
    cov2d: np.ndarray  # 2x2, dilated
    conic: np.ndarray  # (a, b, c) of the inverse
    radius: float


def project_point(mu, cam: Camera):
    """Return (u, v, depth) for one world point."""
    t = cam.to_camera(np.asarray(mu, dtype=np.float64))
    if t[2] <= 0:
        raise BehindCameraError(f"point at camera depth {t[2]} is behind the camera")
    return (cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy, t[2])


def projection_jacobian(t, cam: Camera):
    """d(u, v)/d(t) for camera-space points t, shape (..., 2, 3)."""
    t = np.asarray(t, dtype=np.float64)
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    j = np.zeros(t.shape[:-1] + (2, 3))
    j[..., 0, 0] = cam.fx / tz
    j[..., 0, 2] = -cam.fx * tx / (tz * tz)
    j[..., 1, 1] = cam.fy / tz
    j[..., 1, 2] = -cam.fy * ty / (tz * tz)
    return j


def in_frustum(t, cam: Camera):
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    ok = (tz > cam.near) & (tz < cam.far)
    with np.errstate(divide="ignore", invalid="ignore"):
        xn, yn = tx / tz, ty / tz
    lx, ly = cam.x_limits(), cam.y_limits()
    return ok & (xn >= lx[0]) & (xn <= lx[1]) & (yn >= ly[0]) & (yn <= ly[1])


def screen_covariance(cov3d, t, cam: Camera, dilation=DILATION):
    """(J W) Sigma (J W)^T + dilation * I for batched camera-space points."""
    jw = projection_jacobian(t, cam) @ cam.rotation
    cov2 = jw @ cov3d @ np.swapaxes(jw, -1, -2)
    cov2 = 0.5 * (cov2 + np.swapaxes(cov2, -1, -2))  # exact symmetry despite rounding
    cov2[..., 0, 0] += dilation
    cov2[..., 1, 1] += dilation
    return cov2


def conic_and_radius(cov2):
    a, b, c = cov2[..., 0, 0], cov2[..., 0, 1], cov2[..., 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=-1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    return conic, lam_max, det


def project_gaussian(mu, cov, cam: Camera):
    """Project a single 3D Gaussian; returns ``None`` when culled."""
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    t = cam.to_camera(mu)
    if not in_frustum(t, cam):
        return None
    cov2 = screen_covariance(cov, t, cam)
    conic, lam_max, det = conic_and_radius(cov2)
    if det <= 0:
        return None
    u = cam.fx * t[0] / t[2] + cam.cx
    v = cam.fy * t[1] / t[2] + cam.cy
    return ProjectedGaussian(np.array([u, v]), float(t[2]), cov2, conic, float(3.0 * np.sqrt(lam_max)))
