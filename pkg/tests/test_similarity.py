import numpy as np
import pytest
from scipy import ndimage

from fluororegi.imaging import LabelImage2D
from fluororegi.similarity import (
    PatchGradNCC, PatchParams, ncc, patch_grad_ncc, patch_weights_from_labels,
)
from oracles import ncc_naive, patch_grad_ncc_naive


def smooth_image(rng, shape=(32, 32), sigma=2.0):
    return ndimage.gaussian_filter(rng.random(shape), sigma) * 10


def test_ncc_basic():
    rng = np.random.default_rng(0)
    a = rng.random((8, 8))
    assert ncc(a, a) == pytest.approx(1.0, abs=1e-14)
    assert ncc(a, 2 * a + 5) == pytest.approx(1.0, abs=1e-14)
    assert ncc(a, -a) == pytest.approx(-1.0, abs=1e-14)
    b = rng.random((8, 8))
    assert abs(ncc(a, b) - ncc_naive(a, b)) < 1e-12


def test_ncc_degenerate_flag():
    val, flag = ncc(np.ones((4, 4)), np.arange(16.0).reshape(4, 4), with_flag=True)
    assert val == 0.0 and flag
    with pytest.raises(ValueError):
        ncc(np.ones((3, 3)), np.ones((4, 4)))


def test_ncc_matches_oracle_100():
    rng = np.random.default_rng(1)
    for _ in range(100):
        shape = tuple(rng.integers(2, 12, 2))
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        assert abs(ncc(a, b) - ncc_naive(a, b)) < 1e-12


def test_patch_grad_ncc_self_and_offset():
    rng = np.random.default_rng(2)
    a = smooth_image(rng)
    assert patch_grad_ncc(a, a) == pytest.approx(-1.0, abs=1e-12)
    assert patch_grad_ncc(a, a + 3.7) == pytest.approx(-1.0, abs=1e-12)
    assert patch_grad_ncc(a, 2.0 * a, p=PatchParams(3, 2)) == pytest.approx(-1.0, abs=1e-12)


def test_patch_grad_ncc_matches_oracle():
    rng = np.random.default_rng(3)
    for i in range(10):
        shape = tuple(rng.integers(12, 20, 2))
        a, b = rng.random(shape), rng.random(shape)
        w = rng.random(shape) * (rng.random(shape) > 0.3)
        p = PatchParams(int(rng.integers(1, 4)), int(rng.integers(1, 3)))
        got = patch_grad_ncc(a, b, w, p)
        assert abs(got - patch_grad_ncc_naive(a, b, w, p.patch_radius, p.stride)) < 1e-10


def test_patch_grad_ncc_degenerate_patches_contribute_zero():
    a = np.zeros((15, 15))
    a[:, 8:] = 1.0  # flat left region has zero gradient
    rng = np.random.default_rng(4)
    b = rng.random((15, 15))
    p = PatchParams(2, 1)
    got = patch_grad_ncc(a, b, None, p)
    assert abs(got - patch_grad_ncc_naive(a, b, np.ones_like(a), 2, 1)) < 1e-10


def test_patch_weights_and_errors():
    lab = LabelImage2D(np.array([[0, 1, 2], [3, 4, 0], [5, 6, 1]], dtype=np.uint8))
    w = patch_weights_from_labels(lab, {1, 2})
    assert w[0, 1] == 1 and w[0, 2] == 1 and w[2, 2] == 1 and w.sum() == 3
    assert patch_weights_from_labels(LabelImage2D(np.zeros((3, 3), np.uint8)), {1, 2}).sum() == 0
    assert np.all(patch_weights_from_labels(lab, range(7)) == 1)
    with pytest.raises(ValueError):
        patch_grad_ncc(np.ones((9, 9)), np.ones((9, 9)), np.zeros((9, 9)), PatchParams(2))
    with pytest.raises(ValueError):
        patch_grad_ncc(np.ones((4, 4)), np.ones((4, 4)), None, PatchParams(2))
    with pytest.raises(ValueError):
        PatchParams(0)


def test_noise_degrades_monotonically_on_average():
    rng = np.random.default_rng(5)
    a = smooth_image(rng, sigma=1.5)
    means = []
    for sigma in (0.0, 0.05, 0.2, 0.8):
        vals = [patch_grad_ncc(a, a + np.random.default_rng(s).normal(0, sigma, a.shape))
                for s in range(20)]
        means.append(np.mean(vals))
    assert all(x < y for x, y in zip(means, means[1:]))


def test_weight_locality():
    rng = np.random.default_rng(6)
    a, b = smooth_image(rng), smooth_image(rng)
    p = PatchParams(2, 1)
    w = np.zeros(a.shape)
    w[5:12, 5:12] = 1.0
    c = b.copy()
    # farther than radius + Sobel support from any weighted patch
    c[20:, 20:] += rng.normal(size=(12, 12))
    assert abs(patch_grad_ncc(a, b, w, p) - patch_grad_ncc(a, c, w, p)) < 1e-12


def test_prepared_object_reuse_matches_function():
    rng = np.random.default_rng(7)
    a = smooth_image(rng)
    f = PatchGradNCC(a, None, PatchParams(3, 1))
    for _ in range(3):
        b = smooth_image(rng)
        assert f(b) == patch_grad_ncc(a, b, None, PatchParams(3, 1))
