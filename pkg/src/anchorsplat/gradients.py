"""Reverse-mode gradients of the masked loss, and a finite-difference oracle."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .camera import CameraModel, look_at
from .color import SH_C0, sh_basis, sh_basis_jacobian
from .deformation import CENTER, LOG_SCALE, QUAT, DeformationField, deform_scene
from .data import FrameSample
from .errors import GradientError
from .rasterizer import (
    LossReport, Projection, RenderConfig, TileState, masked_loss_and_grad, render, render_pass,
)
from .scene import GaussianScene, logit, normalize_quat_backward, rotmat_grad_to_quat


@dataclass
class GradientBuffer:
    scene: dict          # name -> array shaped like the scene parameter
    field: dict          # name -> array shaped like the deformation parameter
    screen_grad_norm: np.ndarray  # (N,) |dL/d mean2d| for this pass
    visible: np.ndarray  # (N,) bool


@dataclass
class _Accum:
    base: np.ndarray
    anchor_colors: np.ndarray
    anchor_offsets: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray

    @classmethod
    def zeros(cls, n, k):
        return cls(np.zeros((n, 3)), np.zeros((n, k, 3)), np.zeros((n, k, 2)), np.zeros((n, 2)),
                   np.zeros((n, 2, 2)), np.zeros(n), np.zeros(n))


def _tile_backward(scene: GaussianScene, proj: Projection, config: RenderConfig,
                   t: TileState, gC: np.ndarray, gD: np.ndarray):
    idx = t.idx
    if len(idx) == 0:
        return None
    gC = gC[t.y0:t.y1, t.x0:t.x1].reshape(-1, 3)
    gD = gD[t.y0:t.y1, t.x0:t.x1].reshape(-1)

    g_craw = t.weights[..., None] * gC[None] * (t.c_raw > 0)
    g_base = g_craw.sum(axis=1)
    g_acol = np.einsum("nkp,npc->nkc", t.aw, g_craw)
    g_aw = np.einsum("npc,nkc->nkp", g_craw, scene.anchor_colors[idx])
    g_diff = (-2.0 * config.lambda_e * g_aw * t.aw)[..., None] * t.diff
    g_apos = -g_diff.sum(axis=2)

    depths = proj.depths[idx]
    gv = np.einsum("npc,pc->np", t.colors, gC) + depths[:, None] * gD[None]
    wg = t.weights * gv
    behind = np.zeros_like(wg)
    if len(idx) > 1:
        behind[:-1] = np.cumsum(wg[::-1], axis=0)[::-1][1:]
    g_alpha = np.where(t.live, t.T * gv - behind / (1.0 - t.alpha), 0.0)

    opac = proj.opacities[idx]
    g_opac = np.sum(g_alpha * t.gauss, axis=1)
    g_q = -0.5 * t.gauss * g_alpha * opac[:, None]
    con = proj.conic[idx]
    g_con = np.empty((len(idx), 2, 2))
    g_con[:, 0, 0] = np.sum(g_q * t.dx * t.dx, axis=1)
    g_con[:, 0, 1] = g_con[:, 1, 0] = np.sum(g_q * t.dx * t.dy, axis=1)
    g_con[:, 1, 1] = np.sum(g_q * t.dy * t.dy, axis=1)
    g_mu = -2.0 * np.stack([
        np.sum(g_q * (con[:, 0, 0, None] * t.dx + con[:, 0, 1, None] * t.dy), axis=1),
        np.sum(g_q * (con[:, 0, 1, None] * t.dx + con[:, 1, 1, None] * t.dy), axis=1)], axis=1)
    g_mu = g_mu + g_apos.sum(axis=1)
    g_depth = t.weights @ gD
    return idx, g_base, g_acol, g_apos, g_mu, g_con, g_opac, g_depth


def backward_render(scene: GaussianScene, camera: CameraModel, rp, gC, gD,
                    config: RenderConfig):
    """Gradients w.r.t. the (already deformed) scene parameters from image gradients.

    Returns ``(grads, g_unit_quat, screen_grad_norm)`` where ``grads['quats']`` is
    left to the caller because it depends on how the raw quaternion was produced.
    """
    proj = rp.projection
    n, k = len(scene), scene.n_anchors
    acc = _Accum.zeros(n, k)

    def work(tile):
        return _tile_backward(scene, proj, config, tile, gC, gD)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            parts = list(pool.map(work, rp.tiles))
    else:
        parts = [work(tile) for tile in rp.tiles]
    # fixed tile order keeps the reduction deterministic for any worker count
    for part in parts:
        if part is None:
            continue
        idx, g_base, g_acol, g_apos, g_mu, g_con, g_opac, g_depth = part
        acc.base[idx] += g_base
        acc.anchor_colors[idx] += g_acol
        acc.anchor_offsets[idx] += g_apos
        acc.mean2d[idx] += g_mu
        acc.conic[idx] += g_con
        acc.opacity[idx] += g_opac
        acc.depth[idx] += g_depth

    grads = {name: np.zeros_like(arr) for name, arr in scene.params().items()}
    grads["anchor_colors"] = acc.anchor_colors
    grads["anchor_offsets"] = acc.anchor_offsets
    g_unit = np.zeros((n, 4))
    vis = proj.visible
    if vis.any():
        v = np.flatnonzero(vis)
        con = proj.conic[v]
        g_cov2 = -con @ acc.conic[v] @ con
        M = proj.M[v]
        cov3 = proj.cov3d[v]
        g_cov3 = np.swapaxes(M, 1, 2) @ g_cov2 @ M
        g_M = 2.0 * g_cov2 @ M @ cov3
        g_J = g_M @ camera.rotation.T

        X, Y, Z = proj.p_cam[v, 0], proj.p_cam[v, 1], proj.p_cam[v, 2]
        fx, fy = camera.fx, camera.fy
        gu, gv = acc.mean2d[v, 0], acc.mean2d[v, 1]
        gX = -fx / Z**2 * g_J[:, 0, 2] + fx / Z * gu
        gY = -fy / Z**2 * g_J[:, 1, 2] + fy / Z * gv
        gZ = (-fx / Z**2 * g_J[:, 0, 0] - fy / Z**2 * g_J[:, 1, 1]
              + 2 * fx * X / Z**3 * g_J[:, 0, 2] + 2 * fy * Y / Z**3 * g_J[:, 1, 2]
              - fx * X / Z**2 * gu - fy * Y / Z**2 * gv + acc.depth[v])
        g_center = np.stack([gX, gY, gZ], axis=1) @ camera.rotation

        dirs = proj.view_dirs[v]
        g_base = acc.base[v]
        grads["sh"][v] = sh_basis(dirs, scene.sh_degree)[:, :, None] * g_base[:, None, :]
        if scene.sh_degree > 0:
            g_basis = np.einsum("nkc,nc->nk", scene.sh[v], g_base)
            g_dir = np.einsum("nk,nkd->nd", g_basis, sh_basis_jacobian(dirs, scene.sh_degree))
            g_center += (g_dir - dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)) \
                / proj.view_dist[v, None]
        grads["centers"][v] = g_center

        R = proj.rotmats[v]
        s2 = proj.scales[v] ** 2
        g_R = 2.0 * (g_cov3 @ R) * s2[:, None, :]
        grads["log_scales"][v] = 2.0 * s2 * np.einsum("nij,nik,nkj->nj", R, g_cov3, R)
        g_unit[v] = rotmat_grad_to_quat(proj.rot_unit[v], g_R)
        o = proj.opacities[v]
        grads["opacity_logits"][v] = acc.opacity[v] * o * (1.0 - o)

    return grads, g_unit, np.linalg.norm(acc.mean2d, axis=1)


def backward(frame, camera: CameraModel, scene: GaussianScene, field: DeformationField,
             t: float, config: Optional[RenderConfig] = None):
    """Masked loss at time ``t`` and its gradient w.r.t. the canonical scene and the field."""
    config = config or RenderConfig()
    deformed = deform_scene(scene, field, t)
    psi = field.evaluate(t)
    rp = render_pass(deformed, camera, config)
    report, gC, gD = masked_loss_and_grad(rp.output, frame, config.loss)
    grads, g_unit, screen = backward_render(deformed, camera, rp, gC, gD, config)
    grads["quats"] = normalize_quat_backward(scene.quats + psi[:, QUAT], g_unit)

    g_psi = np.zeros((len(scene), psi.shape[1]))
    g_psi[:, CENTER] = grads["centers"]
    g_psi[:, QUAT] = grads["quats"]
    g_psi[:, LOG_SCALE] = grads["log_scales"]
    field_grads = field.backward(t, g_psi)

    for group, gs in (("scene", grads), ("field", field_grads)):
        for name, g in gs.items():
            if not np.isfinite(g).all():
                i = int(np.argwhere(~np.isfinite(g))[0][0])
                raise GradientError(f"non-finite gradient in {group}.{name} for primitive {i}")
    return report, GradientBuffer(grads, field_grads, screen, rp.projection.visible.copy())


def finite_diff(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                h: float = 1e-4, coords=None) -> np.ndarray:
    """Central differences (f(p+h) - f(p-h)) / 2h for each coordinate (or the given flat ``coords``)."""
    p = np.array(params, dtype=np.float64)
    flat = p.reshape(-1)
    out = np.zeros_like(flat)
    for i in (range(flat.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + h
        fp = loss_fn(p)
        flat[i] = old - h
        fm = loss_fn(p)
        flat[i] = old
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(p.shape)


# parameter class -> (container, array name)
PARAM_CLASSES = {
    "center": ("scene", "centers"),
    "quaternion": ("scene", "quats"),
    "log_scale": ("scene", "log_scales"),
    "opacity_logit": ("scene", "opacity_logits"),
    "sh": ("scene", "sh"),
    "anchor_offset": ("scene", "anchor_offsets"),
    "anchor_color": ("scene", "anchor_colors"),
    "omega": ("field", "weights"),
    "theta": ("field", "centers"),
    "log_sigma": ("field", "log_widths"),
    "delta": ("field", "delta"),
}


@dataclass
class CheckProblem:
    scene: GaussianScene
    field: DeformationField
    camera: CameraModel
    frame: object
    t: float
    config: RenderConfig


def make_check_problem(seed: int, n: int = 5, size: int = 8, k: int = 4,
                       n_basis: int = 4, sh_degree: int = 1) -> CheckProblem:
    """Small random scene kept away from the renderer's non-smooth points.

    Splats are wide enough that alpha stays above the skip threshold across
    the image, opacities stay below the clamp, colors stay positive, and the
    target differs from the render by at least 0.05 per pixel so the L1 kink
    is never crossed by a finite-difference step.
    """
    rng = np.random.default_rng(seed)
    eye = rng.normal(scale=0.1, size=3)
    camera = CameraModel(float(size), float(size), (size - 1) / 2, (size - 1) / 2, size, size,
                         look_at(eye, (0.0, 0.0, 2.0)))
    centers = np.column_stack([rng.uniform(-0.25, 0.25, (n, 2)), rng.uniform(1.8, 2.2, n)])
    K = (sh_degree + 1) ** 2
    sh = rng.normal(scale=0.1, size=(n, K, 3))
    sh[:, 0] = (rng.uniform(0.45, 0.75, (n, 3)) - 0.5) / SH_C0
    scene = GaussianScene(
        centers=centers,
        quats=rng.normal(size=(n, 4)) + np.array([2.0, 0, 0, 0]),
        log_scales=np.log(rng.uniform(0.4, 0.7, (n, 3))),
        opacity_logits=logit(rng.uniform(0.3, 0.7, n)),
        sh=sh,
        anchor_offsets=rng.uniform(-2.0, 2.0, (n, k, 2)),
        anchor_colors=rng.uniform(-0.06, 0.06, (n, k, 3)),
        sh_degree=sh_degree,
    )
    field = DeformationField.zeros(n, "edm", n_basis)
    field.weights[:] = rng.normal(scale=0.03, size=field.weights.shape)
    field.centers[:] = rng.uniform(0.0, 1.0, field.centers.shape)
    field.log_widths[:] = np.log(rng.uniform(0.2, 0.5, field.log_widths.shape))
    field.delta[:] = rng.normal(scale=0.02, size=field.delta.shape)
    t = float(rng.uniform(0.1, 0.9))
    config = RenderConfig()

    out = render(deform_scene(scene, field, t), camera, config)
    sign_c = rng.choice([-1.0, 1.0], size=out.color.shape)
    sign_d = rng.choice([-1.0, 1.0], size=out.depth.shape)
    color = out.color + sign_c * rng.uniform(0.05, 0.3, out.color.shape)
    depth = out.depth + sign_d * rng.uniform(0.05, 0.3, out.depth.shape)
    mask = (rng.uniform(size=out.depth.shape) < 0.8).astype(np.float64)
    mask[0, 0] = 1.0
    frame = FrameSample(color, depth, mask, t)
    return CheckProblem(scene, field, camera, frame, t, config)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    a, f = np.abs(analytic).ravel(), np.abs(numeric).ravel()
    scale = np.maximum(a, f)
    keep = scale >= floor
    return np.abs(analytic.ravel() - numeric.ravel())[keep] / scale[keep]


def gradcheck(problem: CheckProblem, h: float = 1e-4, classes=None) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients, per class."""
    p = problem
    _, buf = backward(p.frame, p.camera, p.scene, p.field, p.t, p.config)
    results = {}
    for cls in classes or PARAM_CLASSES:
        container, name = PARAM_CLASSES[cls]
        base = getattr(p.scene if container == "scene" else p.field, name)

        def loss(arr, container=container, name=name):
            scene, field = p.scene, p.field
            if container == "scene":
                scene = scene.replace(**{name: arr})
            else:
                field = field.replace(**{name: arr})
            return backward_loss(p.frame, p.camera, scene, field, p.t, p.config)

        numeric = finite_diff(loss, base, h)
        analytic = (buf.scene if container == "scene" else buf.field)[name]
        errs = relative_errors(analytic, numeric)
        results[cls] = float(errs.max()) if errs.size else 0.0
    return results


def backward_loss(frame, camera, scene, field, t, config) -> float:
    """Forward-only total loss on the exact path :func:`backward` differentiates."""
    out = render(deform_scene(scene, field, t), camera, config)
    report, _, _ = masked_loss_and_grad(out, frame, config.loss)
    return report.total
