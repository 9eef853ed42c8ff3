"""Scene PLY files and the binary deformation sidecar."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .deformation import FIELD_PARAMS, N_CHANNELS, DeformationField
from .errors import ConfigurationError
from .scene import GaussianScene

CHANNEL_NAMES = ("center_x", "center_y", "center_z", "rot_w", "rot_x", "rot_y", "rot_z",
                 "log_scale_x", "log_scale_y", "log_scale_z")
SCENE_FILE = "scene.ply"
FIELD_FILE = "deformation.bin"


def _attribute_names(K: int, k: int) -> list[str]:
    names = ["x", "y", "z", *(f"rot_{i}" for i in range(4)),
             *(f"log_scale_{i}" for i in range(3)), "opacity_logit",
             *(f"f_dc_{i}" for i in range(3)), *(f"f_rest_{i}" for i in range(3 * (K - 1)))]
    for i in range(k):
        names += [f"anchor_{i}_dx", f"anchor_{i}_dy",
                  f"anchor_{i}_r", f"anchor_{i}_g", f"anchor_{i}_b"]
    return names


def save_ply(scene: GaussianScene, path) -> None:
    n, K, k = len(scene), scene.sh.shape[1], scene.n_anchors
    # f_rest is channel-major: all red coefficients, then green, then blue
    f_rest = np.transpose(scene.sh[:, 1:, :], (0, 2, 1)).reshape(n, -1)
    anchors = np.concatenate([scene.anchor_offsets, scene.anchor_colors], axis=2).reshape(n, -1)
    cols = np.concatenate([scene.centers, scene.quats, scene.log_scales,
                           scene.opacity_logits[:, None], scene.sh[:, 0, :], f_rest, anchors], axis=1)
    names = _attribute_names(K, k)
    vertex = np.empty(n, dtype=[(name, "<f8") for name in names])
    for j, name in enumerate(names):
        vertex[name] = cols[:, j]
    PlyData([PlyElement.describe(vertex, "vertex")], text=False, byte_order="<").write(str(path))


def load_ply(path) -> GaussianScene:
    el = PlyData.read(str(path))["vertex"]
    names = [p.name for p in el.properties]
    n_rest = sum(1 for p in names if p.startswith("f_rest_"))
    K = n_rest // 3 + 1
    k = sum(1 for p in names if p.startswith("anchor_") and p.endswith("_dx"))
    data = np.stack([np.asarray(el[name], dtype=np.float64) for name in _attribute_names(K, k)],
                    axis=1).reshape(len(el.data), -1)
    n = len(data)
    sh = np.empty((n, K, 3))
    sh[:, 0] = data[:, 11:14]
    sh[:, 1:] = data[:, 14:14 + n_rest].reshape(n, 3, K - 1).transpose(0, 2, 1)
    anchors = data[:, 14 + n_rest:].reshape(n, k, 5)
    return GaussianScene(data[:, 0:3], data[:, 3:7], data[:, 7:10], data[:, 10], sh,
                         anchors[:, :, :2], anchors[:, :, 2:], int(round(np.sqrt(K))) - 1)


def save_field(field: DeformationField, path) -> None:
    """Length-prefixed JSON header, then (N, 10, F) little-endian float64 values."""
    arrays = [field.weights, field.centers, field.log_widths, field.fourier_cos,
              field.fourier_sin, field.poly, field.delta[:, :, None]]
    layout = [[name, int(a.shape[-1])] for name, a in zip(FIELD_PARAMS, arrays)]
    header = {
        "backend": field.backend,
        "n_primitives": len(field),
        "n_channels": N_CHANNELS,
        "n_basis": field.n_basis,
        "channels": list(CHANNEL_NAMES),
        "fields": layout,
        "dtype": "<f8",
        "order": ["primitive", "channel", "field"],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = np.concatenate(arrays, axis=2).astype("<f8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(body.tobytes())


def load_field(path) -> DeformationField:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<Q", raw, 0)
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    n, c = header["n_primitives"], header["n_channels"]
    widths = [w for _, w in header["fields"]]
    body = np.frombuffer(raw, dtype="<f8", offset=8 + hlen).reshape(n, c, sum(widths))
    parts = {}
    start = 0
    for name, w in header["fields"]:
        parts[name] = body[:, :, start:start + w].astype(np.float64)
        start += w
    if set(parts) != set(FIELD_PARAMS):
        raise ConfigurationError(f"{path}: unexpected field layout {list(parts)}")
    parts["delta"] = parts["delta"][:, :, 0]
    return DeformationField(backend=header["backend"], **parts)


def save_checkpoint(directory, scene: GaussianScene, field: DeformationField) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_ply(scene, d / SCENE_FILE)
    save_field(field, d / FIELD_FILE)
    return d


def load_checkpoint(directory) -> tuple[GaussianScene, DeformationField]:
    d = Path(directory)
    for name in (SCENE_FILE, FIELD_FILE):
        if not (d / name).is_file():
            raise ConfigurationError(f"missing checkpoint file: {d / name}")
    return load_ply(d / SCENE_FILE), load_field(d / FIELD_FILE)
