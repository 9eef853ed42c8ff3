"""Per-primitive color: SH base color plus screen-space anchor colors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


@dataclass
class AnchorSpec:
    offset: np.ndarray  # pixels, relative to the projected center
    color: np.ndarray   # additive RGB, may be negative


@dataclass(frozen=True)
class ColorFieldConfig:
    lambda_e: float = 0.1
    k: int = 4

    def __post_init__(self):
        if not self.lambda_e > 0:
            raise ValueError("lambda_e must be positive")
        if self.k < 0:
            raise ValueError("k must be non-negative")


def default_anchor_offsets(k: int) -> np.ndarray:
    """Axis-aligned unit offsets (+x, -x, +y, -y), repeated at growing radius past four."""
    base = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    return np.array([base[i % 4] * (1 + i // 4) for i in range(k)]).reshape(k, 2)


def anchor_weight(p, anchor_pos, lambda_e: float):
    d = np.asarray(p, dtype=np.float64) - np.asarray(anchor_pos, dtype=np.float64)
    return np.exp(-lambda_e * np.sum(d * d, axis=-1))


def anchor_color(p, anchors: Sequence[AnchorSpec], center2d, lambda_e: float) -> np.ndarray:
    out = np.zeros(3)
    for a in anchors:
        out = out + anchor_weight(p, np.asarray(center2d) + a.offset, lambda_e) * np.asarray(a.color)
    return out


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, shape (..., (degree+1)**2), in the usual splatting sign convention."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, SH_C0)]
    if degree > 0:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree > 2:
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(dir) treating x, y, z as independent; shape (..., K, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree > 0:
        c = np.full_like(x, SH_C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree > 1:
        a = SH_C2
        rows += [
            (a[0] * y, a[0] * x, zero),
            (zero, a[1] * z, a[1] * y),
            (-2 * a[2] * x, -2 * a[2] * y, 4 * a[2] * z),
            (a[3] * z, zero, a[3] * x),
            (2 * a[4] * x, -2 * a[4] * y, zero),
        ]
    if degree > 2:
        b = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (6 * b[0] * x * y, b[0] * (3 * xx - 3 * yy), zero),
            (b[1] * y * z, b[1] * x * z, b[1] * x * y),
            (-2 * b[2] * x * y, b[2] * (4 * zz - xx - 3 * yy), 8 * b[2] * y * z),
            (-6 * b[3] * x * z, -6 * b[3] * y * z, b[3] * (6 * zz - 3 * xx - 3 * yy)),
            (b[4] * (4 * zz - 3 * xx - yy), -2 * b[4] * x * y, 8 * b[4] * x * z),
            (2 * b[5] * x * z, -2 * b[5] * y * z, b[5] * (xx - yy)),
            (b[6] * (3 * xx - 3 * yy), -6 * b[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def sh_color(sh_coeffs, d, degree: int) -> np.ndarray:
    """0.5 + sum_k Y_k(d) * coeff_k, per RGB channel; sh_coeffs is (..., K, 3)."""
    basis = sh_basis(d, degree)
    return 0.5 + np.einsum("...k,...kc->...c", basis, np.asarray(sh_coeffs, dtype=np.float64))


def combined_color(primitive, p, center2d, d, config: ColorFieldConfig, degree: int | None = None):
    """SH color along ``d`` plus the anchor term at pixel ``p``, floored at zero."""
    sh = np.asarray(primitive.sh_coeffs, dtype=np.float64)
    if degree is None:
        degree = int(round(np.sqrt(sh.shape[0]))) - 1
    base = sh_color(sh, d, degree)
    return np.maximum(base + anchor_color(p, primitive.anchors, center2d, config.lambda_e), 0.0)
