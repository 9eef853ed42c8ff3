"""Depth-sorted alpha compositing of projected Gaussians, and the masked loss."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import CameraModel, projection_jacobian, world_to_camera
from .color import sh_basis
from .errors import DatasetError, RenderError
from .scene import GaussianScene, activations, quat_to_rotmat


@dataclass(frozen=True)
class RenderConfig:
    lambda_e: float = 0.1
    near: float = 0.01
    lowpass: float = 0.3
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    min_transmittance: float = 1e-4
    tile_size: int = 16
    workers: int = 1
    loss: str = "l1"


@dataclass
class RenderOutput:
    color: np.ndarray          # (H, W, 3)
    depth: np.ndarray          # (H, W)
    transmittance: np.ndarray  # (H, W)


@dataclass
class LossReport:
    color_term: float
    depth_term: float

    @property
    def total(self) -> float:
        return self.color_term + self.depth_term


@dataclass
class Projection:
    """Per-primitive screen-space quantities for one (scene, camera) pair."""

    visible: np.ndarray     # (N,) bool, in front of the near plane and able to reach alpha_min
    order: np.ndarray       # visible indices sorted front to back
    rot_unit: np.ndarray    # (N, 4) normalized quaternions
    rotmats: np.ndarray     # (N, 3, 3)
    scales: np.ndarray      # (N, 3)
    opacities: np.ndarray   # (N,)
    cov3d: np.ndarray       # (N, 3, 3)
    p_cam: np.ndarray       # (N, 3)
    M: np.ndarray           # (N, 2, 3) Jacobian times view rotation
    means2d: np.ndarray     # (N, 2)
    cov2d: np.ndarray       # (N, 2, 2)
    conic: np.ndarray       # (N, 2, 2) inverse of cov2d
    depths: np.ndarray      # (N,)
    view_dirs: np.ndarray   # (N, 3) unit, camera center to primitive
    view_dist: np.ndarray   # (N,)
    base_colors: np.ndarray  # (N, 3) SH color along the view direction
    extent: np.ndarray      # (N, 2) half-size of the box outside which alpha < alpha_min


def project_scene(scene: GaussianScene, camera: CameraModel, config: RenderConfig) -> Projection:
    act = activations(scene)
    n = len(scene)
    R = quat_to_rotmat(act.rotations)
    cov3d = (R * (act.scales ** 2)[:, None, :]) @ np.swapaxes(R, 1, 2)
    p_cam = world_to_camera(camera, scene.centers)
    depths = p_cam[:, 2]
    in_front = depths > config.near
    safe = np.where(in_front[:, None], p_cam, np.array([0.0, 0.0, 1.0]))
    J = projection_jacobian(camera, safe)
    M = J @ camera.rotation
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2) + config.lowpass * np.eye(2)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    if in_front.any() and not (det[in_front] > 0).all():
        bad = int(np.flatnonzero(in_front & ~(det > 0))[0])
        raise RenderError(f"projected covariance of primitive {bad} is not positive definite")
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / det
    means2d = np.stack([camera.fx * safe[:, 0] / safe[:, 2] + camera.cx,
                        camera.fy * safe[:, 1] / safe[:, 2] + camera.cy], axis=1)

    rel = scene.centers - camera.position
    view_dist = np.linalg.norm(rel, axis=1)
    view_dirs = rel / np.where(view_dist > 0, view_dist, 1.0)[:, None]
    basis = sh_basis(view_dirs, scene.sh_degree)
    base_colors = 0.5 + np.einsum("nk,nkc->nc", basis, scene.sh)

    reach = 255.0 * act.opacities
    visible = in_front & (reach > 1.0)
    log_reach = 2.0 * np.log(np.maximum(reach, 1.0))
    extent = np.sqrt(log_reach[:, None] * np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1))
    extent = extent * (1 + 1e-9) + 1e-6

    idx = np.flatnonzero(visible)
    order = idx[np.lexsort((idx, depths[idx]))]
    return Projection(visible, order, act.rotations, R, act.scales, act.opacities, cov3d, p_cam,
                      M, means2d, cov2d, conic, depths, view_dirs, view_dist, base_colors, extent)


@dataclass
class TileState:
    """Forward intermediates of one tile, replayed by the backward pass."""

    y0: int
    y1: int
    x0: int
    x1: int
    idx: np.ndarray       # (n,) primitive indices, front to back
    pix: np.ndarray       # (P, 2) pixel centers (x, y)
    dx: np.ndarray        # (n, P)
    dy: np.ndarray
    gauss: np.ndarray     # (n, P) exp(-q/2)
    alpha: np.ndarray     # (n, P) effective alpha (0 where skipped or terminated)
    live: np.ndarray      # (n, P) contributes and alpha not clamped
    T: np.ndarray         # (n, P) transmittance before each primitive
    weights: np.ndarray   # (n, P) alpha * T
    c_raw: np.ndarray     # (n, P, 3) color before the zero floor
    colors: np.ndarray    # (n, P, 3)
    diff: np.ndarray      # (n, k, P, 2) pixel minus anchor position
    aw: np.ndarray        # (n, k, P) anchor weights
    out_color: np.ndarray  # (P, 3)
    out_depth: np.ndarray  # (P,)
    out_T: np.ndarray      # (P,)


@dataclass
class RenderPass:
    output: RenderOutput
    projection: Projection
    tiles: list


def _tile_ranges(camera: CameraModel, tile: int):
    for y0 in range(0, camera.height, tile):
        for x0 in range(0, camera.width, tile):
            yield y0, min(y0 + tile, camera.height), x0, min(x0 + tile, camera.width)


def _tile_forward(scene: GaussianScene, proj: Projection, config: RenderConfig, rng, idx) -> TileState:
    y0, y1, x0, x1 = rng
    ys, xs = np.mgrid[y0:y1, x0:x1]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    P, n, k = len(pix), len(idx), scene.n_anchors

    mu = proj.means2d[idx]
    dx = pix[None, :, 0] - mu[:, 0:1]
    dy = pix[None, :, 1] - mu[:, 1:2]
    con = proj.conic[idx]
    q = con[:, 0, 0, None] * dx * dx + 2 * con[:, 0, 1, None] * dx * dy + con[:, 1, 1, None] * dy * dy
    gauss = np.exp(-0.5 * q)
    raw = proj.opacities[idx, None] * gauss
    alpha = np.minimum(raw, config.alpha_max)
    alpha = np.where(alpha < config.alpha_min, 0.0, alpha)

    T = np.ones((n, P))
    if n > 1:
        T[1:] = np.cumprod(1.0 - alpha[:-1], axis=0)
    on = T >= config.min_transmittance
    alpha = np.where(on, alpha, 0.0)
    if n > 1:
        T[1:] = np.cumprod(1.0 - alpha[:-1], axis=0)
    live = (alpha > 0) & (raw <= config.alpha_max)
    weights = alpha * T

    offsets = scene.anchor_offsets[idx]
    pos = mu[:, None, :] + offsets                             # (n, k, 2)
    diff = pix[None, None, :, :] - pos[:, :, None, :]          # (n, k, P, 2)
    aw = np.exp(-config.lambda_e * np.sum(diff * diff, axis=-1))
    c_raw = proj.base_colors[idx, None, :] + np.einsum("nkp,nkc->npc", aw, scene.anchor_colors[idx])
    colors = np.maximum(c_raw, 0.0)

    out_color = np.einsum("np,npc->pc", weights, colors)
    out_depth = weights.T @ proj.depths[idx] if n else np.zeros(P)
    out_T = T[-1] * (1.0 - alpha[-1]) if n else np.ones(P)
    if n and not (np.isfinite(out_color).all() and np.isfinite(out_depth).all()):
        bad = ~(np.isfinite(colors).all(axis=-1) & np.isfinite(weights))
        i, p = np.argwhere(bad)[0] if bad.any() else (0, int(np.flatnonzero(
            ~np.isfinite(out_color).all(axis=-1))[0]))
        raise RenderError(f"non-finite value at pixel (x={int(pix[p, 0])}, y={int(pix[p, 1])}) "
                          f"from primitive {int(idx[i])}")
    return TileState(y0, y1, x0, x1, idx, pix, dx, dy, gauss, alpha, live, T, weights,
                     c_raw, colors, diff, aw, out_color, out_depth, out_T)


def tile_bins(proj: Projection, camera: CameraModel, tile: int):
    """Primitives (front to back) whose alpha_min box touches each tile."""
    ranges = list(_tile_ranges(camera, tile))
    order = proj.order
    lo = proj.means2d[order] - proj.extent[order]
    hi = proj.means2d[order] + proj.extent[order]
    bins = []
    for y0, y1, x0, x1 in ranges:
        hit = (hi[:, 0] >= x0) & (lo[:, 0] <= x1 - 1) & (hi[:, 1] >= y0) & (lo[:, 1] <= y1 - 1)
        bins.append(order[hit])
    return ranges, bins


def render_pass(scene: GaussianScene, camera: CameraModel,
                config: Optional[RenderConfig] = None) -> RenderPass:
    config = config or RenderConfig()
    proj = project_scene(scene, camera, config)
    ranges, bins = tile_bins(proj, camera, config.tile_size)

    def work(i):
        return _tile_forward(scene, proj, config, ranges[i], bins[i])

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            tiles = list(pool.map(work, range(len(ranges))))
    else:
        tiles = [work(i) for i in range(len(ranges))]

    H, W = camera.height, camera.width
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    trans = np.ones((H, W))
    for t in tiles:
        shape = (t.y1 - t.y0, t.x1 - t.x0)
        color[t.y0:t.y1, t.x0:t.x1] = t.out_color.reshape(shape + (3,))
        depth[t.y0:t.y1, t.x0:t.x1] = t.out_depth.reshape(shape)
        trans[t.y0:t.y1, t.x0:t.x1] = t.out_T.reshape(shape)
    return RenderPass(RenderOutput(color, depth, trans), proj, tiles)


def render(scene: GaussianScene, camera: CameraModel,
           config: Optional[RenderConfig] = None) -> RenderOutput:
    """Composite the scene front to back through ``camera``; black background."""
    return render_pass(scene, camera, config).output


def _residual_terms(diff: np.ndarray, mask: np.ndarray, norm: str):
    if norm == "l1":
        return np.abs(diff) * mask, np.sign(diff) * mask
    if norm == "l2":
        return diff * diff * mask, 2.0 * diff * mask
    raise ValueError(f"unknown loss norm {norm!r}")


def masked_loss_and_grad(render: RenderOutput, frame, norm: str = "l1"):
    """Loss report plus dL/d(color image) and dL/d(depth image)."""
    mask = np.asarray(frame.mask, dtype=np.float64)
    if render.color.shape[:2] != mask.shape:
        raise DatasetError("render and frame dimensions differ")
    count = float(mask.sum())
    if count == 0:
        raise DatasetError("tissue mask is empty")
    c_val, c_grad = _residual_terms(render.color - frame.color, mask[..., None], norm)
    d_val, d_grad = _residual_terms(render.depth - frame.depth, mask, norm)
    report = LossReport(float(c_val.sum() / (3.0 * count)), float(d_val.sum() / count))
    return report, c_grad / (3.0 * count), d_grad / count


def masked_loss(render: RenderOutput, frame, norm: str = "l1") -> LossReport:
    """Mean color and depth residuals over tissue pixels (mask == 1)."""
    return masked_loss_and_grad(render, frame, norm)[0]
