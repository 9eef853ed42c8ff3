"""Canonical Gaussian scene: storage, activations and 3D covariance."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .color import AnchorSpec, default_anchor_offsets
from .errors import InvalidParameterError

SCENE_PARAMS = (
    "centers",
    "quats",
    "log_scales",
    "opacity_logits",
    "sh",
    "anchor_offsets",
    "anchor_colors",
)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions stored as (w, x, y, z).

    Accepts shape (4,) or (N, 4); returns (3, 3) or (N, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. R(q) back to the (unit) quaternion components."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = gR
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def normalize_quat_backward(q_raw: np.ndarray, g_unit: np.ndarray) -> np.ndarray:
    """Gradient through q -> q / |q|."""
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    qn = q_raw / norm
    return (g_unit - qn * np.sum(qn * g_unit, axis=-1, keepdims=True)) / norm


def build_covariance(rotation, log_scale) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(log_scale)).

    Works on a single primitive or a batch; the quaternion is used as given.
    """
    R = quat_to_rotmat(rotation)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)


@dataclass
class GaussianPrimitive:
    center: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray
    anchors: list[AnchorSpec] = field(default_factory=list)

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(normalize_quat(self.rotation), self.log_scale)


def evaluate_gaussian(primitive: GaussianPrimitive, x) -> float:
    """Unnormalized Gaussian density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))."""
    d = np.asarray(x, dtype=np.float64) - primitive.center
    m = np.linalg.solve(primitive.covariance, d)
    return float(np.exp(-0.5 * d @ m))


@dataclass
class ActiveParams:
    rotations: np.ndarray  # unit quaternions
    scales: np.ndarray
    opacities: np.ndarray


@dataclass
class GaussianScene:
    """Struct-of-arrays scene. ``N`` primitives, ``K`` SH coefficients, ``k`` anchors."""

    centers: np.ndarray         # (N, 3)
    quats: np.ndarray           # (N, 4) raw, (w, x, y, z)
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray              # (N, K, 3)
    anchor_offsets: np.ndarray  # (N, k, 2) pixels, relative to the projected center
    anchor_colors: np.ndarray   # (N, k, 3)
    sh_degree: int = 1

    def __post_init__(self):
        for f in SCENE_PARAMS:
            setattr(self, f, np.asarray(getattr(self, f), dtype=np.float64))
        n = len(self.centers)
        K = (self.sh_degree + 1) ** 2
        if not 0 <= self.sh_degree <= 3:
            raise InvalidParameterError(f"sh_degree must be in 0..3, got {self.sh_degree}")
        expected = {
            "centers": (n, 3), "quats": (n, 4), "log_scales": (n, 3),
            "opacity_logits": (n,), "sh": (n, K, 3),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise InvalidParameterError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        k = self.anchor_offsets.shape[1] if self.anchor_offsets.ndim == 3 else -1
        if self.anchor_offsets.shape != (n, k, 2) or self.anchor_colors.shape != (n, k, 3):
            raise InvalidParameterError("anchor arrays must be (N, k, 2) and (N, k, 3)")

    @classmethod
    def create(cls, centers, quats=None, log_scales=None, opacity_logits=None, sh=None,
               anchor_offsets=None, anchor_colors=None, sh_degree: int = 1, k: int = 4):
        """Build a scene filling unspecified fields with neutral defaults."""
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        n = len(centers)
        K = (sh_degree + 1) ** 2
        if quats is None:
            quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if log_scales is None:
            log_scales = np.full((n, 3), np.log(0.1))
        if opacity_logits is None:
            opacity_logits = np.full(n, float(logit(0.1)))
        if sh is None:
            sh = np.zeros((n, K, 3))
        if anchor_offsets is None:
            anchor_offsets = np.tile(default_anchor_offsets(k), (n, 1, 1))
        if anchor_colors is None:
            anchor_colors = np.zeros((n, anchor_offsets.shape[1], 3))
        return cls(centers, quats, log_scales, opacity_logits, sh,
                   anchor_offsets, anchor_colors, sh_degree)

    @classmethod
    def from_primitives(cls, primitives: Sequence[GaussianPrimitive], sh_degree: int):
        k = len(primitives[0].anchors) if primitives else 0
        if any(len(p.anchors) != k for p in primitives):
            raise InvalidParameterError("all primitives must share one anchor count")
        return cls(
            centers=np.array([p.center for p in primitives]).reshape(-1, 3),
            quats=np.array([p.rotation for p in primitives]).reshape(-1, 4),
            log_scales=np.array([p.log_scale for p in primitives]).reshape(-1, 3),
            opacity_logits=np.array([p.opacity_logit for p in primitives], dtype=np.float64),
            sh=np.array([p.sh_coeffs for p in primitives]).reshape(-1, (sh_degree + 1) ** 2, 3),
            anchor_offsets=np.array([[a.offset for a in p.anchors] for p in primitives]).reshape(-1, k, 2),
            anchor_colors=np.array([[a.color for a in p.anchors] for p in primitives]).reshape(-1, k, 3),
            sh_degree=sh_degree,
        )

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def n_anchors(self) -> int:
        return self.anchor_offsets.shape[1]

    def primitive(self, i: int) -> GaussianPrimitive:
        anchors = [AnchorSpec(self.anchor_offsets[i, a].copy(), self.anchor_colors[i, a].copy())
                   for a in range(self.n_anchors)]
        return GaussianPrimitive(self.centers[i].copy(), self.quats[i].copy(),
                                 self.log_scales[i].copy(), float(self.opacity_logits[i]),
                                 self.sh[i].copy(), anchors)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in SCENE_PARAMS}

    def replace(self, **arrays) -> "GaussianScene":
        return replace(self, **arrays)

    def copy(self) -> "GaussianScene":
        return replace(self, **{k: v.copy() for k, v in self.params().items()})

    def subset(self, idx) -> "GaussianScene":
        return replace(self, **{k: v[idx] for k, v in self.params().items()})

    def concat(self, other: "GaussianScene") -> "GaussianScene":
        return replace(self, **{k: np.concatenate([v, getattr(other, k)])
                                for k, v in self.params().items()})

    def activations(self) -> ActiveParams:
        return activations(self)

    def equals(self, other: "GaussianScene") -> bool:
        return self.sh_degree == other.sh_degree and all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in fields(self) if f.name in SCENE_PARAMS)


def activations(scene: GaussianScene) -> ActiveParams:
    """Map raw parameters to unit rotations, positive scales and (0, 1) opacities."""
    for name, arr in scene.params().items():
        bad = ~np.isfinite(arr).all(axis=tuple(range(1, arr.ndim)))
        if bad.any():
            raise InvalidParameterError(
                f"non-finite {name} on primitive {int(np.flatnonzero(bad)[0])}")
    norms = np.linalg.norm(scene.quats, axis=1)
    if (norms == 0).any():
        raise InvalidParameterError(
            f"zero-norm quaternion on primitive {int(np.flatnonzero(norms == 0)[0])}")
    return ActiveParams(
        rotations=scene.quats / norms[:, None],
        scales=np.exp(scene.log_scales),
        opacities=sigmoid(scene.opacity_logits),
    )
