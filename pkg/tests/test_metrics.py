import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsplat.data import FrameSample
from anchorsplat.errors import DatasetError
from anchorsplat.metrics import PSNR_CAP, evaluate, gaussian_window, psnr, ssim

seeds = st.integers(0, 2**31)


def test_psnr_examples():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.2, 0.8, size=(16, 16, 3))
    assert psnr(a, a) == PSNR_CAP == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    b = a.copy()
    b[:8] += 0.2
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / 0.02), abs=1e-9)
    assert psnr(a, b) == pytest.approx(16.9897, abs=1e-4)


def test_psnr_respects_mask():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)
    b[:, :2] = 0.9
    mask = np.zeros((4, 4))
    mask[:, 2:] = 1
    assert psnr(a, b, mask) == pytest.approx(20.0, abs=1e-9)


def test_ssim_examples():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(20, 24, 3))
    assert ssim(a, a) == 1.0
    c1 = 0.01 ** 2
    expect = (2 * 0.25 * 0.75 + c1) / (0.25 ** 2 + 0.75 ** 2 + c1)
    got = ssim(np.full((16, 16, 3), 0.25), np.full((16, 16, 3), 0.75))
    assert got == pytest.approx(expect, abs=1e-12)
    assert got == pytest.approx(0.600064, abs=1e-6)


def test_ssim_noise_ranks_below_matched_shift():
    rng = np.random.default_rng(2)
    a = rng.uniform(0.3, 0.7, size=(32, 32, 3))
    noise = rng.normal(scale=0.1, size=a.shape)
    noisy = a + noise
    shifted = a + np.sqrt(np.mean(noise ** 2))  # same MSE, hence the same PSNR
    assert psnr(a, noisy) == pytest.approx(psnr(a, shifted), abs=1e-9)
    assert ssim(a, noisy) < ssim(a, shifted)


def test_gaussian_window_is_normalised():
    w = gaussian_window()
    assert w.shape == (11, 11) and w.sum() == pytest.approx(1.0, abs=1e-15)
    assert w[5, 5] == w.max()


def test_ssim_excludes_windows_touching_the_mask():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(24, 24))
    b = a.copy()
    b[:, :6] = rng.uniform(size=(24, 6))  # garbage confined to the masked-out columns
    mask = np.ones((24, 24))
    mask[:, :6] = 0
    assert ssim(a, b, mask) == 1.0
    assert ssim(a, b) < 1.0


def test_metric_errors():
    with pytest.raises(DatasetError):
        psnr(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(DatasetError, match="smaller"):
        ssim(np.zeros((8, 30)), np.zeros((8, 30)))
    with pytest.raises(DatasetError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_evaluate_reports_per_frame_and_clips():
    gt = np.full((12, 12, 3), 0.5)
    frames = [FrameSample(gt, np.zeros((12, 12)), np.ones((12, 12)), 0.0, index=i) for i in (3, 9)]
    rep = evaluate([gt + 0.1, gt + 2.0], frames)
    assert [r[0] for r in rep.per_frame] == [3, 9]
    assert rep.per_frame[0][1] == pytest.approx(20.0, abs=1e-9)
    assert rep.per_frame[1][1] == pytest.approx(10 * math.log10(4), abs=1e-9)  # clipped to 1.0
    assert rep.psnr == pytest.approx((rep.per_frame[0][1] + rep.per_frame[1][1]) / 2)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 14, 15, 3))
    mask = (rng.uniform(size=(14, 15)) < 0.9).astype(float)
    mask[:12, :12] = 1
    assert psnr(a, b, mask) == psnr(b, a, mask)
    assert ssim(a, b, mask) == pytest.approx(ssim(b, a, mask), abs=1e-15)
    assert ssim(a, b, mask) <= 1.0


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_psnr_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 10, 10, 3))
    mask = (rng.uniform(size=(10, 10)) < 0.7).astype(float)
    mask[0, 0] = 1
    perm = rng.permutation(100)
    pa = a.reshape(100, 3)[perm].reshape(10, 10, 3)
    pb = b.reshape(100, 3)[perm].reshape(10, 10, 3)
    pm = mask.reshape(100)[perm].reshape(10, 10)
    assert psnr(pa, pb, pm) == pytest.approx(psnr(a, b, mask), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_ssim_self_similarity_is_exact(seed):
    a = np.random.default_rng(seed).uniform(size=(13, 17, 3))
    assert ssim(a, a) == 1.0
