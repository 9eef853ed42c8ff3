"""Optimization loop: Adam with parameter groups, densification and pruning."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .data import Dataset, init_from_depth, scene_extent
from .deformation import DeformationField, deform_scene
from .errors import ConfigurationError, DivergenceError
from .gradients import backward
from .metrics import psnr
from .rasterizer import RenderConfig, render
from .scene import GaussianScene, quat_to_rotmat, sigmoid

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr_initial: float = 1.6e-3
    lr_final: float = 1.6e-5
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 0.05
    lr_sh: float = 2.5e-3
    lr_anchor: float = 2.5e-3
    lr_deformation: float = 1.6e-3
    lr_deformation_final: float = 1.6e-5
    lr_offset: float = 1.6e-3
    lr_offset_final: float = 1.6e-5
    densify: bool = True
    densify_freeze_iters: int = 600
    densify_interval: int = 100
    densify_until: int = 2500
    grad_threshold: float = 2e-4
    opacity_prune_threshold: float = 5e-3
    scale_split_threshold: float = 0.01  # fraction of the scene extent
    omega_l2: float = 0.0
    frozen: tuple = ()
    deform_channels: tuple = ()  # field channels left trainable; empty means all ten
    seed: int = 0
    eval_interval: int = 500
    checkpoint_interval: int = 500
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    # model shape
    sh_degree: int = 1
    anchors: int = 4
    lambda_e: float = 0.1
    deform_backend: str = "edm"
    n_basis: int = 17
    n_fourier: int = 8
    poly_degree: int = 3
    init_stride: int = 4
    loss: str = "l1"
    workers: int = 1

    def __post_init__(self):
        self.frozen = tuple(self.frozen)
        self.deform_channels = tuple(int(c) for c in self.deform_channels)
        if any(not 0 <= c < 10 for c in self.deform_channels):
            raise ConfigurationError("deform_channels must index the ten deformed attributes (0..9)")
        if self.iterations < 0 or self.densify_freeze_iters < 0:
            raise ConfigurationError("iterations and densify_freeze_iters must be non-negative")
        if self.iterations and not self.iterations > self.densify_freeze_iters:
            raise ConfigurationError("iterations must exceed densify_freeze_iters")
        for name in ("grad_threshold", "opacity_prune_threshold", "scale_split_threshold",
                     "densify_interval"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        unknown = set(self.frozen) - set(PARAM_GROUPS)
        if unknown:
            raise ConfigurationError(f"unknown parameter groups in frozen: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        d["deform_channels"] = list(self.deform_channels)
        return d

    def render_config(self) -> RenderConfig:
        return RenderConfig(lambda_e=self.lambda_e, workers=self.workers, loss=self.loss)


# optimizer group -> (container, array names)
PARAM_GROUPS = {
    "center": ("scene", ("centers",)),
    "rotation": ("scene", ("quats",)),
    "scale": ("scene", ("log_scales",)),
    "opacity": ("scene", ("opacity_logits",)),
    "sh": ("scene", ("sh",)),
    "anchor": ("scene", ("anchor_offsets", "anchor_colors")),
    "deformation": ("field", ("weights", "centers", "log_widths", "fourier_cos", "fourier_sin",
                              "poly")),
    "offset": ("field", ("delta",)),
}


def exp_decay(step: int, total: int, lr_init: float, lr_final: float) -> float:
    """Log-linear interpolation from ``lr_init`` to ``lr_final`` over ``total`` steps."""
    if total <= 0:
        return lr_init
    s = min(max(step / total, 0.0), 1.0)
    return math.exp((1 - s) * math.log(lr_init) + s * math.log(lr_final))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter and advances ``state``."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ConfigurationError("parameter, gradient and moment shapes differ")
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** state.step)
    v_hat = state.v / (1 - beta2 ** state.step)
    out = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    if not np.isfinite(out).all():
        raise DivergenceError("non-finite parameter after Adam update")
    return out


@dataclass
class TrainResult:
    scene: GaussianScene
    field: DeformationField
    log: list            # dicts: iteration, loss, psnr_test, n_primitives
    final_psnr: float = float("nan")


@dataclass
class DensifyStats:
    accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


class Trainer:
    """Holds the evolving scene, field and optimizer state for one run."""

    def __init__(self, dataset: Dataset, config: TrainConfig,
                 scene: Optional[GaussianScene] = None, field_: Optional[DeformationField] = None):
        if not dataset.train:
            raise ConfigurationError("dataset has no training frames")
        self.dataset = dataset
        self.config = config
        self.render_config = config.render_config()
        if scene is None:
            first = dataset.frames[0]
            scene = init_from_depth(first, dataset.camera_for(first), config.init_stride,
                                    config.sh_degree, config.anchors)
        if field_ is None:
            field_ = DeformationField.zeros(len(scene), config.deform_backend, config.n_basis,
                                            config.n_fourier, config.poly_degree)
        if len(field_) != len(scene):
            raise ConfigurationError("initial field and scene sizes differ")
        self.scene = scene.copy()
        self.field = field_.copy()
        self.extent = scene_extent(self.scene.centers)
        self.rng = np.random.default_rng(config.seed)
        self.state: dict[tuple[str, str], AdamState] = {}
        for key in self._trainable():
            self.state[key] = AdamState.like(self._get(*key))
        self.stats = DensifyStats.zeros(len(self.scene))
        self.log: list[dict] = []

    # -- parameter plumbing
    def _trainable(self):
        for group, (container, names) in PARAM_GROUPS.items():
            if group in self.config.frozen:
                continue
            for name in names:
                if container == "field" and name not in self.field.trainable():
                    continue
                yield (container, name)

    def _get(self, container, name):
        return getattr(self.scene if container == "scene" else self.field, name)

    def _set(self, container, name, value):
        setattr(self.scene if container == "scene" else self.field, name, value)

    def learning_rate(self, group: str, iteration: int) -> float:
        c = self.config
        if group == "center":
            return exp_decay(iteration, c.iterations, c.lr_initial, c.lr_final)
        if group == "deformation":
            return exp_decay(iteration, c.iterations, c.lr_deformation, c.lr_deformation_final)
        if group == "offset":
            return exp_decay(iteration, c.iterations, c.lr_offset, c.lr_offset_final)
        return {"rotation": c.lr_rotation, "scale": c.lr_scale, "opacity": c.lr_opacity,
                "sh": c.lr_sh, "anchor": c.lr_anchor}[group]

    def _group_of(self, container, name):
        for group, (cont, names) in PARAM_GROUPS.items():
            if cont == container and name in names:
                return group
        raise KeyError(name)

    # -- one iteration
    def step(self, iteration: int) -> float:
        c = self.config
        frame = self.dataset.frames[self.dataset.train[int(self.rng.integers(len(self.dataset.train)))]]
        camera = self.dataset.camera_for(frame)
        report, buf = backward(frame, camera, self.scene, self.field, frame.time, self.render_config)
        loss = report.total
        if c.omega_l2 and self.field.n_basis:
            loss += c.omega_l2 * float(np.sum(self.field.weights ** 2))
            buf.field["weights"] = buf.field["weights"] + 2.0 * c.omega_l2 * self.field.weights

        if c.deform_channels:
            off = np.ones(10, bool)
            off[list(c.deform_channels)] = False
            for g in buf.field.values():
                g[:, off] = 0.0

        self.stats.accum[buf.visible] += buf.screen_grad_norm[buf.visible]
        self.stats.count[buf.visible] += 1

        for key in self._trainable():
            container, name = key
            grads = buf.scene if container == "scene" else buf.field
            lr = self.learning_rate(self._group_of(container, name), iteration)
            self._set(container, name, adam_step(self._get(*key), grads[name], self.state[key], lr))
        self.scene.quats = self.scene.quats / np.linalg.norm(self.scene.quats, axis=1, keepdims=True)
        self.field.clamp_widths()
        return loss

    # -- densification
    def densify_and_prune(self, iteration: int) -> None:
        self.scene, self.field, keep_map = densify_and_prune(
            self.scene, self.field, self.stats, self.config, self.extent, self.rng)
        for key, st in self.state.items():
            old_m, old_v = st.m, st.v
            shape = (len(keep_map),) + old_m.shape[1:]
            st.m = np.zeros(shape)
            st.v = np.zeros(shape)
            src = keep_map >= 0
            st.m[src] = old_m[keep_map[src]]
            st.v[src] = old_v[keep_map[src]]
        self.stats = DensifyStats.zeros(len(self.scene))

    def evaluate_test(self) -> float:
        values = []
        for i in self.dataset.test:
            frame = self.dataset.frames[i]
            out = render(deform_scene(self.scene, self.field, frame.time),
                         self.dataset.camera_for(frame), self.render_config)
            values.append(psnr(np.clip(out.color, 0, 1), frame.color, frame.mask))
        return float(np.mean(values)) if values else float("nan")

    def run(self, out_dir=None) -> TrainResult:
        c = self.config
        initial = None
        above = 0
        for it in range(1, c.iterations + 1):
            n_before = len(self.scene)
            loss = self.step(it)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at iteration {it}")
            initial = loss if initial is None else initial
            above = above + 1 if loss > c.divergence_factor * initial else 0
            if above >= c.divergence_patience:
                raise DivergenceError(
                    f"loss above {c.divergence_factor}x its initial value ({initial:.4g}) "
                    f"for {above} iterations (iteration {it}, loss {loss:.4g})")
            if it == c.densify_freeze_iters:
                self.stats = DensifyStats.zeros(len(self.scene))
            if (c.densify and it > c.densify_freeze_iters and it <= c.densify_until
                    and it % c.densify_interval == 0):
                self.densify_and_prune(it)
            row = {"iteration": it, "loss": loss, "psnr_test": float("nan"),
                   "n_primitives": n_before}
            if c.eval_interval and (it % c.eval_interval == 0 or it == c.iterations):
                row["psnr_test"] = self.evaluate_test()
                log.info("iter %d loss %.5f test psnr %.2f n=%d", it, loss, row["psnr_test"],
                         len(self.scene))
            self.log.append(row)
            if out_dir is not None and c.checkpoint_interval and it % c.checkpoint_interval == 0:
                save_checkpoint(Path(out_dir) / "checkpoints" / f"iter_{it:06d}", self.scene, self.field)
        final = self.log[-1]["psnr_test"] if self.log else float("nan")
        if out_dir is not None:
            save_checkpoint(out_dir, self.scene, self.field)
            write_metrics_csv(Path(out_dir) / "metrics.csv", self.log)
        return TrainResult(self.scene, self.field, self.log, final)


def densify_and_prune(scene: GaussianScene, field_: DeformationField, stats: DensifyStats,
                      config: TrainConfig, extent: float, rng: np.random.Generator):
    """Clone small / split large high-gradient primitives, then drop transparent ones.

    Returns the new scene and field plus ``keep_map``: for every output row the
    source row whose optimizer state it keeps, or -1 for freshly created rows.
    """
    n = len(scene)
    mean_grad = np.where(stats.count > 0, stats.accum / np.maximum(stats.count, 1), 0.0)
    hot = mean_grad > config.grad_threshold
    max_scale = np.exp(scene.log_scales).max(axis=1)
    split_thr = config.scale_split_threshold * extent
    clone = hot & (max_scale <= split_thr)
    split = hot & (max_scale > split_thr)

    ci = np.flatnonzero(clone)
    si = np.flatnonzero(split)
    parts_scene = [scene.subset(~split), scene.subset(ci)]
    parts_field = [field_.subset(~split), field_.subset(ci)]
    keep_map = [np.flatnonzero(~split), np.full(len(ci), -1)]
    if len(si):
        children = scene.subset(np.repeat(si, 2))
        R = quat_to_rotmat(children.quats / np.linalg.norm(children.quats, axis=1, keepdims=True))
        s = np.exp(children.log_scales)
        offsets = np.einsum("nij,nj->ni", R, rng.normal(size=s.shape) * s)
        children.centers = children.centers + offsets
        children.log_scales = children.log_scales - np.log(1.6)
        parts_scene.append(children)
        parts_field.append(field_.subset(np.repeat(si, 2)))
        keep_map.append(np.full(2 * len(si), -1))

    new_scene, new_field = parts_scene[0], parts_field[0]
    for s_, f_ in zip(parts_scene[1:], parts_field[1:]):
        new_scene = new_scene.concat(s_)
        new_field = new_field.concat(f_)
    keep_map = np.concatenate(keep_map)

    alive = sigmoid(new_scene.opacity_logits) >= config.opacity_prune_threshold
    if not alive.any():
        alive[np.argmax(new_scene.opacity_logits)] = True
    if len(ci) or len(si) or not alive.all():
        log.debug("densify: %d cloned, %d split, %d pruned (n %d -> %d)",
                  len(ci), len(si), int((~alive).sum()), n, int(alive.sum()))
    return new_scene.subset(alive), new_field.subset(alive), keep_map[alive]


def write_metrics_csv(path, rows) -> None:
    with open(path, "w") as f:
        f.write("iteration,loss,psnr_test\n")
        for r in rows:
            p = "" if math.isnan(r["psnr_test"]) else f"{r['psnr_test']:.6f}"
            f.write(f"{r['iteration']},{r['loss']:.10g},{p}\n")


def train(dataset: Dataset, config: TrainConfig, scene: Optional[GaussianScene] = None,
          field_: Optional[DeformationField] = None, out_dir=None) -> TrainResult:
    """Fit a scene and deformation field to ``dataset``; see :class:`TrainConfig`."""
    return Trainer(dataset, config, scene, field_).run(out_dir)


def manifest(config: TrainConfig, command: str, extra: Optional[dict] = None) -> dict:
    d = {"command": command, "engine_version": __version__, "seed": config.seed,
         "config": config.to_dict()}
    if extra:
        d.update(extra)
    return d
