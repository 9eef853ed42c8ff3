"""Frame datasets: on-disk layout, train/test split, seeding and synthetic scenes.

Directory layout::

    cameras.json                 one camera object, or a list with one per frame
    frames/000000_color.png      8-bit RGB (``.ppm`` also accepted)
    frames/000000_depth.pfm      little-endian float32
    frames/000000_mask.pgm       8-bit, 255 = tissue, 0 = tool
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .camera import CameraModel, look_at, unproject
from .color import SH_C0, default_anchor_offsets
from .deformation import CENTER, DeformationField, deform_scene
from .errors import DatasetError
from .rasterizer import RenderConfig, render
from .scene import GaussianScene, logit, normalize_quat

TEST_PERIOD = 8


@dataclass
class FrameSample:
    color: np.ndarray   # (H, W, 3) in [0, 1]
    depth: np.ndarray   # (H, W)
    mask: np.ndarray    # (H, W) in {0, 1}
    time: float
    camera_index: int = 0
    index: int = 0


@dataclass
class Dataset:
    frames: list
    cameras: list
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def camera_for(self, frame: FrameSample) -> CameraModel:
        return self.cameras[frame.camera_index]


def split_indices(n_frames: int) -> tuple[list[int], list[int]]:
    """Every eighth frame (i % 8 == 7) goes to the test split."""
    test = [i for i in range(n_frames) if i % TEST_PERIOD == TEST_PERIOD - 1]
    train = [i for i in range(n_frames) if i % TEST_PERIOD != TEST_PERIOD - 1]
    return train, test


def normalized_times(n_frames: int) -> np.ndarray:
    if n_frames == 1:
        return np.zeros(1)
    return np.arange(n_frames) / (n_frames - 1)


# ---------------------------------------------------------------- file formats

def write_pfm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype="<f4")
    color = img.ndim == 3
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if m is None:
        raise DatasetError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=m.end())
    arr = arr.reshape((h, w, channels) if channels == 3 else (h, w))
    return arr[::-1].astype(np.float32)


def write_color(path, color: np.ndarray) -> None:
    """Write an RGB image in [0, 1] as 8-bit PNG or PPM (chosen by suffix)."""
    Image.fromarray(to_uint8(color), mode="RGB").save(path)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize_color(color: np.ndarray) -> np.ndarray:
    return to_uint8(color).astype(np.float64) / 255.0


def _read_image(path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None
    except OSError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


# ---------------------------------------------------------------- load / save

def load_dataset(path) -> Dataset:
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.is_file():
        raise DatasetError(f"missing file: {cam_file}")
    cams = json.loads(cam_file.read_text())
    frame_dir = root / "frames"
    indices = sorted({int(m.group(1)) for p in frame_dir.glob("*_color.*")
                      if (m := re.match(r"(\d+)_color\.(png|ppm)$", p.name))})
    if not indices:
        raise DatasetError(f"no color frames found under {frame_dir}")
    n = len(indices)
    if isinstance(cams, dict):
        cameras = [CameraModel.from_dict(cams)]
        cam_of = [0] * n
    else:
        if len(cams) != n:
            raise DatasetError(f"{cam_file}: {len(cams)} cameras for {n} frames")
        cameras = [CameraModel.from_dict(c) for c in cams]
        cam_of = list(range(n))

    times = normalized_times(n)
    frames = []
    for i, idx in enumerate(indices):
        stem = f"{idx:06d}"
        color_path = next((frame_dir / f"{stem}_color.{ext}" for ext in ("png", "ppm")
                           if (frame_dir / f"{stem}_color.{ext}").is_file()))
        depth_path = frame_dir / f"{stem}_depth.pfm"
        mask_path = frame_dir / f"{stem}_mask.pgm"
        if not depth_path.is_file():
            raise DatasetError(f"missing file: {depth_path}")
        color = _read_image(color_path, "RGB").astype(np.float64) / 255.0
        depth = read_pfm(depth_path).astype(np.float64)
        mask = (_read_image(mask_path, "L") > 127).astype(np.float64)
        cam = cameras[cam_of[i]]
        for p, arr in ((color_path, color), (depth_path, depth), (mask_path, mask)):
            if arr.shape[:2] != (cam.height, cam.width):
                raise DatasetError(f"{p}: size {arr.shape[1]}x{arr.shape[0]} does not match "
                                   f"camera {cam.width}x{cam.height}")
        if not mask.any():
            raise DatasetError(f"{mask_path}: mask is empty")
        frames.append(FrameSample(color, depth, mask, float(times[i]), cam_of[i], idx))
    train, test = split_indices(n)
    return Dataset(frames, cameras, train, test)


def save_dataset(dataset: Dataset, path, color_format: str = "png") -> None:
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    if len(dataset.cameras) == 1:
        cams = dataset.cameras[0].to_dict()
    else:
        cams = [dataset.camera_for(f).to_dict() for f in dataset.frames]
    (root / "cameras.json").write_text(json.dumps(cams, indent=2))
    for f in dataset.frames:
        stem = root / "frames" / f"{f.index:06d}"
        write_color(f"{stem}_color.{color_format}", f.color)
        write_pfm(f"{stem}_depth.pfm", f.depth)
        write_mask(f"{stem}_mask.pgm", f.mask)


# ---------------------------------------------------------------- seeding

def init_from_depth(frame0: FrameSample, camera: CameraModel, stride: int = 4,
                    sh_degree: int = 1, k: int = 4, min_points: int = 10) -> GaussianScene:
    """One primitive per ``stride``-th masked pixel, back-projected at its depth."""
    H, W = frame0.mask.shape
    ys, xs = np.mgrid[0:H:stride, 0:W:stride]
    ys, xs = ys.ravel(), xs.ravel()
    keep = (frame0.mask[ys, xs] > 0) & (frame0.depth[ys, xs] > 0)
    ys, xs = ys[keep], xs[keep]
    if len(ys) < min_points:
        raise DatasetError(f"only {len(ys)} seed points on the first frame (need {min_points})")
    pix = np.stack([xs, ys], axis=1).astype(np.float64)
    pts = unproject(camera, pix, frame0.depth[ys, xs])

    # world size of one stride x stride pixel block at each seed's depth
    footprint = stride * frame0.depth[ys, xs] / camera.fx
    if len(pts) > 1:
        nn = min(3, len(pts) - 1)
        dist, _ = cKDTree(pts).query(pts, k=nn + 1)
        # isolated seeds near the camera would otherwise cover the whole image
        spacing = np.maximum(np.minimum(dist[:, 1:].mean(axis=1), footprint), 1e-7)
    else:
        spacing = footprint

    sh = np.zeros((len(pts), (sh_degree + 1) ** 2, 3))
    sh[:, 0, :] = (frame0.color[ys, xs] - 0.5) / SH_C0
    return GaussianScene.create(
        pts, log_scales=np.repeat(np.log(spacing)[:, None], 3, axis=1),
        opacity_logits=np.full(len(pts), float(logit(0.1))), sh=sh, sh_degree=sh_degree, k=k)


# ---------------------------------------------------------------- synthetic scenes

MOTIONS = ("static", "global_shift", "periodic", "composite")


@dataclass
class SynthSpec:
    n_gaussians: int = 20
    width: int = 64
    height: int = 64
    frames: int = 16
    motion: str = "static"
    shift: tuple = (0.05, 0.0, 0.0)
    seed: int = 0
    sh_degree: int = 1
    k: int = 4
    n_basis: int = 17
    anchor_color_scale: float = 0.25
    motion_amplitude: float = 0.04
    depth_range: tuple = (1.8, 2.4)
    scale_range: tuple = (0.08, 0.2)


@dataclass
class SynthTruth:
    scene: GaussianScene
    field: DeformationField
    spec: SynthSpec

    def to_json(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "scene": {k: v.tolist() for k, v in self.scene.params().items()}
                     | {"sh_degree": self.scene.sh_degree},
            "field": {k: v.tolist() for k, v in self.field.params().items()}
                     | {"backend": self.field.backend},
        }

    @classmethod
    def from_json(cls, d: dict) -> "SynthTruth":
        sd = dict(d["scene"])
        scene = GaussianScene(sh_degree=sd.pop("sh_degree"), **{k: np.array(v) for k, v in sd.items()})
        fd = dict(d["field"])
        field_ = DeformationField(backend=fd.pop("backend"), **{k: np.array(v) for k, v in fd.items()})
        spec = d["spec"]
        spec = SynthSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in spec.items()})
        return cls(scene, field_, spec)


def synthetic_camera(width: int, height: int) -> CameraModel:
    return CameraModel(float(width), float(width), (width - 1) / 2.0, (height - 1) / 2.0,
                       width, height, look_at((0.0, 0.0, 0.0), (0.0, 0.0, 1.0)))


def random_scene(rng: np.random.Generator, spec: SynthSpec, camera: CameraModel) -> GaussianScene:
    n = spec.n_gaussians
    z = rng.uniform(*spec.depth_range, n)
    half_w = 0.42 * camera.width / camera.fx
    half_h = 0.42 * camera.height / camera.fy
    centers = np.stack([rng.uniform(-half_w, half_w, n) * z,
                        rng.uniform(-half_h, half_h, n) * z, z], axis=1)
    quats = normalize_quat(rng.normal(size=(n, 4)))
    log_scales = np.log(rng.uniform(*spec.scale_range, (n, 3)))
    opacity_logits = logit(rng.uniform(0.6, 0.95, n))
    K = (spec.sh_degree + 1) ** 2
    sh = np.zeros((n, K, 3))
    sh[:, 0] = (rng.uniform(0.2, 0.7, (n, 3)) - 0.5) / SH_C0
    if K > 1:
        sh[:, 1:] = rng.normal(scale=0.05, size=(n, K - 1, 3))
    offsets = rng.uniform(-3.0, 3.0, (n, spec.k, 2))
    colors = rng.uniform(-spec.anchor_color_scale, spec.anchor_color_scale, (n, spec.k, 3))
    return GaussianScene(centers, quats, log_scales, opacity_logits, sh, offsets, colors,
                         spec.sh_degree)


def synthetic_field(rng: np.random.Generator, spec: SynthSpec) -> DeformationField:
    n = spec.n_gaussians
    field_ = DeformationField.zeros(n, "edm", spec.n_basis)
    if spec.motion not in MOTIONS:
        raise DatasetError(f"unknown motion {spec.motion!r}; expected one of {MOTIONS}")
    if spec.motion in ("periodic", "composite"):
        # a few broad bases per center channel give smooth non-rigid motion
        n_active = min(3, spec.n_basis)
        for j in rng.permutation(spec.n_basis)[:n_active]:
            field_.weights[:, CENTER, j] = rng.normal(scale=spec.motion_amplitude, size=(n, 3))
        field_.log_widths[:, CENTER, :] = np.log(0.15)
    if spec.motion in ("global_shift", "composite"):
        field_.delta[:, CENTER] = np.asarray(spec.shift, dtype=np.float64)
    return field_


def render_frame(scene: GaussianScene, field_: DeformationField, camera: CameraModel, t: float,
                 config: Optional[RenderConfig] = None):
    return render(deform_scene(scene, field_, t), camera, config)


def generate_synthetic(spec: SynthSpec, config: Optional[RenderConfig] = None):
    """Random ground-truth scene and motion, rendered into a dataset.

    Frames are quantized exactly as they would be stored on disk (8-bit color,
    float32 depth) so that a saved and reloaded dataset matches bit for bit.
    """
    rng = np.random.default_rng(spec.seed)
    camera = synthetic_camera(spec.width, spec.height)
    scene = random_scene(rng, spec, camera)
    field_ = synthetic_field(rng, spec)
    times = normalized_times(spec.frames)
    frames = []
    for i, t in enumerate(times):
        out = render_frame(scene, field_, camera, float(t), config)
        frames.append(FrameSample(
            color=quantize_color(out.color),
            depth=out.depth.astype(np.float32).astype(np.float64),
            mask=np.ones((spec.height, spec.width)),
            time=float(t), camera_index=0, index=i))
    train, test = split_indices(spec.frames)
    return Dataset(frames, [camera], train, test), SynthTruth(scene, field_, spec)


def perturb_scene(scene: GaussianScene, rng: np.random.Generator, jitter: float,
                  reset_colors: bool = True) -> GaussianScene:
    """Jitter centers by N(0, jitter^2) and optionally reset SH and anchors to neutral."""
    out = scene.copy()
    out.centers = out.centers + rng.normal(scale=jitter, size=out.centers.shape)
    if reset_colors:
        out.sh = np.zeros_like(out.sh)
        out.anchor_colors = np.zeros_like(out.anchor_colors)
        out.anchor_offsets = np.tile(default_anchor_offsets(out.n_anchors), (len(out), 1, 1))
    return out


def scene_extent(centers: np.ndarray) -> float:
    """Radius of the smallest centroid-centred ball containing every center."""
    c = np.asarray(centers)
    if len(c) == 0:
        return 1.0
    return float(np.max(np.linalg.norm(c - c.mean(axis=0), axis=1))) or 1.0
