"""Pinhole camera and EWA projection of 3D Gaussians to screen space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

NEAR_PLANE = 0.01
LOWPASS_EPS = 0.3  # pixel^2 dilation added to every projected covariance


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    w2c: np.ndarray  # 4x4 world-to-camera

    def __post_init__(self):
        w2c = np.asarray(self.w2c, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "w2c", w2c)
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ConfigurationError("principal point must lie inside the image")
        R = w2c[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ConfigurationError("world_to_camera rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.w2c[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.w2c[:3, 3]

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "w2c": [float(v) for v in self.w2c.ravel()]}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["width"]), int(d["height"]), np.asarray(d["w2c"], dtype=np.float64))
        except KeyError as exc:
            raise ConfigurationError(f"camera entry missing key {exc}") from None

    def __eq__(self, other):
        return isinstance(other, CameraModel) and self.to_dict() == other.to_dict()


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target`` (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ eye
    return w2c


def world_to_camera(camera: CameraModel, x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) @ camera.rotation.T + camera.translation


def project_point(camera: CameraModel, x_world, near: float = NEAR_PLANE):
    """Pixel coordinates and camera-space depth of one or more world points.

    Returns ``(pixel, depth, visible)``; points at or behind the near plane are
    flagged not visible and their pixel is NaN.
    """
    p = world_to_camera(camera, x_world)
    X, Y, Z = p[..., 0], p[..., 1], p[..., 2]
    visible = Z > near
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(visible, camera.fx * X / Z + camera.cx, np.nan)
        v = np.where(visible, camera.fy * Y / Z + camera.cy, np.nan)
    return np.stack([u, v], axis=-1), Z, visible


def unproject(camera: CameraModel, pixel, depth) -> np.ndarray:
    """Inverse of :func:`project_point` at a known camera-space depth."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    X = (pixel[..., 0] - camera.cx) / camera.fx * depth
    Y = (pixel[..., 1] - camera.cy) / camera.fy * depth
    pc = np.stack([X, Y, depth], axis=-1)
    return (pc - camera.translation) @ camera.rotation


def projection_jacobian(camera: CameraModel, p_cam: np.ndarray) -> np.ndarray:
    """d(pixel)/d(camera point), shape (..., 2, 3)."""
    X, Y, Z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    J = np.zeros(p_cam.shape[:-1] + (2, 3))
    J[..., 0, 0] = camera.fx / Z
    J[..., 0, 2] = -camera.fx * X / (Z * Z)
    J[..., 1, 1] = camera.fy / Z
    J[..., 1, 2] = -camera.fy * Y / (Z * Z)
    return J


def project_covariance(camera: CameraModel, mu_world, cov_world, eps: float = LOWPASS_EPS):
    """Screen-space covariance J W Sigma W^T J^T + eps I (local affine approximation)."""
    p = world_to_camera(camera, mu_world)
    M = projection_jacobian(camera, p) @ camera.rotation
    return M @ np.asarray(cov_world, dtype=np.float64) @ np.swapaxes(M, -1, -2) + eps * np.eye(2)
