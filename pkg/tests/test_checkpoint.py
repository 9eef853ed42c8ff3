import json
import struct

import numpy as np
import pytest
from plyfile import PlyData

from anchorsplat.checkpoint import (
    CHANNEL_NAMES, load_checkpoint, load_field, load_ply, save_checkpoint, save_field, save_ply,
)
from anchorsplat.deformation import DeformationField
from anchorsplat.errors import ConfigurationError
from anchorsplat.scene import GaussianScene


def random_scene(rng, n=6, sh_degree=2, k=3):
    K = (sh_degree + 1) ** 2
    return GaussianScene.create(rng.normal(size=(n, 3)), quats=rng.normal(size=(n, 4)),
                                log_scales=rng.normal(size=(n, 3)), opacity_logits=rng.normal(size=n),
                                sh=rng.normal(size=(n, K, 3)), anchor_offsets=rng.normal(size=(n, k, 2)),
                                anchor_colors=rng.normal(size=(n, k, 3)), sh_degree=sh_degree, k=k)


def random_field(rng, n, backend):
    f = DeformationField.zeros(n, backend, n_basis=5, n_fourier=3, poly_degree=2)
    for name in f.params():
        getattr(f, name)[:] = rng.normal(size=getattr(f, name).shape)
    return f


@pytest.mark.parametrize("sh_degree, k", [(0, 0), (1, 4), (3, 2)])
def test_ply_round_trip_is_exact(tmp_path, sh_degree, k):
    s = random_scene(np.random.default_rng(0), sh_degree=sh_degree, k=k)
    save_ply(s, tmp_path / "s.ply")
    back = load_ply(tmp_path / "s.ply")
    assert back.equals(s) and back.sh_degree == sh_degree and back.n_anchors == k


def test_ply_layout(tmp_path):
    s = random_scene(np.random.default_rng(1), sh_degree=1, k=1)
    save_ply(s, tmp_path / "s.ply")
    raw = (tmp_path / "s.ply").read_bytes()
    assert b"format binary_little_endian 1.0" in raw[:200]
    el = PlyData.read(str(tmp_path / "s.ply"))["vertex"]
    names = [p.name for p in el.properties]
    assert names[:14] == ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "log_scale_0", "log_scale_1",
                          "log_scale_2", "opacity_logit", "f_dc_0", "f_dc_1", "f_dc_2"]
    assert names[-5:] == ["anchor_0_dx", "anchor_0_dy", "anchor_0_r", "anchor_0_g", "anchor_0_b"]
    # rest coefficients are channel-major: all red first
    np.testing.assert_array_equal(el["f_rest_0"], s.sh[:, 1, 0])
    np.testing.assert_array_equal(el["f_rest_3"], s.sh[:, 1, 1])
    assert all(p.val_dtype in ("f8", "<f8", "float64", "double") for p in el.properties)


@pytest.mark.parametrize("backend", ["edm", "gs", "fps"])
def test_field_round_trip_is_exact(tmp_path, backend):
    f = random_field(np.random.default_rng(2), 4, backend)
    save_field(f, tmp_path / "d.bin")
    back = load_field(tmp_path / "d.bin")
    assert back.backend == backend
    for name, arr in f.params().items():
        assert np.array_equal(getattr(back, name), arr)


def test_field_header_and_body_layout(tmp_path):
    f = random_field(np.random.default_rng(3), 2, "edm")
    save_field(f, tmp_path / "d.bin")
    raw = (tmp_path / "d.bin").read_bytes()
    (hlen,) = struct.unpack_from("<Q", raw)
    header = json.loads(raw[8:8 + hlen])
    assert header["backend"] == "edm" and header["n_basis"] == 5 and header["n_channels"] == 10
    assert header["channels"] == list(CHANNEL_NAMES)
    body = np.frombuffer(raw[8 + hlen:], "<f8").reshape(2, 10, -1)
    # primitive-major, then channel, then the weights block first
    np.testing.assert_array_equal(body[1, 4, :5], f.weights[1, 4])
    np.testing.assert_array_equal(body[:, :, -1], f.delta)


def test_checkpoint_directory(tmp_path):
    rng = np.random.default_rng(4)
    s = random_scene(rng)
    f = random_field(rng, len(s), "edm")
    save_checkpoint(tmp_path / "ck", s, f)
    s2, f2 = load_checkpoint(tmp_path / "ck")
    assert s2.equals(s) and np.array_equal(f2.weights, f.weights)
    (tmp_path / "ck" / "deformation.bin").unlink()
    with pytest.raises(ConfigurationError, match="deformation.bin"):
        load_checkpoint(tmp_path / "ck")


def test_saving_twice_is_byte_identical(tmp_path):
    rng = np.random.default_rng(5)
    s = random_scene(rng)
    f = random_field(rng, len(s), "fps")
    save_checkpoint(tmp_path / "a", s, f)
    save_checkpoint(tmp_path / "b", s, f)
    for name in ("scene.ply", "deformation.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
