import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from facedyn.evalmetrics import identity_loss, lrms, luma, pixel_loss, psnr, smoothness, ssim


def loop_psnr(a, b):
    tot, cnt = 0.0, 0
    for v, w in zip(a.ravel().tolist(), b.ravel().tolist()):
        tot += (float(v) - float(w)) ** 2
        cnt += 1
    mse = tot / cnt
    return math.inf if mse == 0 else 10 * math.log10(255.0 ** 2 / mse)


def loop_ssim(a, b):
    def gray(img):
        H, W, _ = img.shape
        return [[0.299 * img[r, c, 0] + 0.587 * img[r, c, 1] + 0.114 * img[r, c, 2] for c in range(W)]
                for r in range(H)]

    x, y = gray(a.astype(float)), gray(b.astype(float))
    g = [math.exp(-((k - 5) ** 2) / (2 * 1.5 ** 2)) for k in range(11)]
    s = sum(g)
    g = [v / s for v in g]
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    H, W = len(x), len(x[0])
    vals = []
    for r in range(H - 10):
        for c in range(W - 10):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(11):
                for j in range(11):
                    w = g[i] * g[j]
                    u, v = x[r + i][c + j], y[r + i][c + j]
                    mx += w * u
                    my += w * v
                    sxx += w * u * u
                    syy += w * v * v
                    sxy += w * u * v
            sxx -= mx * mx
            syy -= my * my
            sxy -= mx * my
            vals.append((2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return sum(vals) / len(vals)


def rand_image(rng, shape=(16, 14, 3)):
    return rng.integers(0, 256, size=shape, dtype=np.uint8)


# ---------------------------------------------------------------- psnr

def test_psnr_identical_is_inf(rng):
    a = rand_image(rng)
    assert psnr(a, a) == math.inf


def test_psnr_uniform_offset_16():
    a = np.full((8, 8, 3), 100, dtype=np.uint8)
    b = a + 16
    assert psnr(a, b) == pytest.approx(10 * math.log10(255 ** 2 / 256), abs=1e-12)
    assert round(psnr(a, b), 2) == 24.05


def test_psnr_loop_oracle_and_symmetry(rng):
    for _ in range(5):
        a, b = rand_image(rng), rand_image(rng)
        assert psnr(a, b) == pytest.approx(loop_psnr(a, b), rel=1e-9)
        assert psnr(a, b) == psnr(b, a)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


# ---------------------------------------------------------------- ssim

def test_ssim_identical_is_exactly_one(rng):
    a = rand_image(rng, (20, 20, 3))
    assert ssim(a, a) == 1.0


def test_ssim_inverted_checkerboard_negative():
    tile = (np.indices((32, 32)).sum(axis=0) // 4) % 2
    a = np.repeat((tile * 200 + 20).astype(np.uint8)[..., None], 3, axis=2)
    assert ssim(a, 255 - a) < 0


def test_ssim_loop_oracle(rng):
    for _ in range(3):
        a, b = rand_image(rng), rand_image(rng)
        assert ssim(a, b) == pytest.approx(loop_ssim(a, b), abs=1e-9)


def test_ssim_symmetric_and_bounded(rng):
    a, b = rand_image(rng, (24, 24, 3)), rand_image(rng, (24, 24, 3))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
    assert -1 <= ssim(a, b) <= 1


def test_ssim_agrees_with_skimage_on_luma(rng):
    metrics = pytest.importorskip("skimage.metrics")
    from skimage.util import crop

    a, b = rand_image(rng, (40, 40, 3)), rand_image(rng, (40, 40, 3))
    _, smap = metrics.structural_similarity(luma(a), luma(b), gaussian_weights=True, sigma=1.5,
                                            use_sample_covariance=False, data_range=255, full=True)
    assert ssim(a, b) == pytest.approx(crop(smap, 5).mean(), abs=1e-9)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


# ---------------------------------------------------------------- lrms

def test_lrms_zero_and_offset(rng):
    q = rng.uniform(0, 100, size=(2, 68))
    assert lrms(q, q) == 0.0
    assert lrms(q + np.array([[3.0], [4.0]]), q, normalize=False) == pytest.approx(5.0, abs=1e-12)


def test_lrms_normalized_by_bbox_diagonal():
    q = np.array([[0.0, 30.0, 0.0], [0.0, 0.0, 40.0]])
    assert lrms(q + np.array([[3.0], [4.0]]), q) == pytest.approx(0.1, abs=1e-12)


@given(shift=st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), seed=st.integers(0, 1000))
def test_lrms_translation_invariance(shift, seed):
    r = np.random.default_rng(seed)
    p, q = r.uniform(0, 100, (2, 20)), r.uniform(0, 100, (2, 20))
    s = np.array(shift)[:, None]
    assert lrms(p + s, q + s, normalize=False) == pytest.approx(lrms(p, q, normalize=False), abs=1e-9)


def test_lrms_loop_oracle(rng):
    p, q = rng.normal(size=(2, 68)), rng.normal(size=(2, 68))
    tot = sum((p[0, i] - q[0, i]) ** 2 + (p[1, i] - q[1, i]) ** 2 for i in range(68))
    assert lrms(p, q, normalize=False) == pytest.approx(math.sqrt(tot / 68), rel=1e-9)


@pytest.mark.parametrize("p,q", [
    (np.zeros((2, 3)), np.zeros((2, 4))),
    (np.zeros((3, 3)), np.zeros((3, 3))),
    (np.full((2, 3), np.nan), np.zeros((2, 3))),
])
def test_lrms_bad_inputs(p, q):
    with pytest.raises(ValueError):
        lrms(p, q, normalize=False)


# ---------------------------------------------------------------- losses

def test_pixel_loss_cases(rng):
    a = rand_image(rng)
    assert pixel_loss(a, a) == 0.0
    x = np.zeros((1, 1, 3))
    assert pixel_loss(x, x + np.array([1, 2, 2])) == 9.0
    b = rand_image(rng)
    loop = sum((float(u) - float(v)) ** 2 for u, v in zip(a.ravel(), b.ravel()))
    assert pixel_loss(a, b) == pytest.approx(loop, rel=1e-12)
    assert pixel_loss(a, b) == pixel_loss(b, a)


def test_identity_loss_cases():
    e = np.array([0.3, -1.2, 2.0])
    assert identity_loss(e, e) == 0.0
    assert identity_loss([1.0, 0.0], [0.0, 1.0]) == 2.0
    assert identity_loss([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]) == 4.0
    with pytest.raises(ValueError):
        identity_loss([0.0, 0.0], [1.0, 0.0])


@given(a=st.floats(1e-3, 1e3), b=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
def test_identity_loss_scale_invariant(a, b, seed):
    r = np.random.default_rng(seed)
    e1, e2 = r.normal(size=16), r.normal(size=16)
    assert identity_loss(a * e1, b * e2) == pytest.approx(identity_loss(e1, e2), abs=1e-12)


def test_identity_loss_loop_oracle(rng):
    e1, e2 = rng.normal(size=32), rng.normal(size=32)
    n1 = math.sqrt(sum(v * v for v in e1))
    n2 = math.sqrt(sum(v * v for v in e2))
    loop = sum((u / n1 - v / n2) ** 2 for u, v in zip(e1, e2))
    assert identity_loss(e1, e2) == pytest.approx(loop, abs=1e-12)


# ---------------------------------------------------------------- smoothness

def test_smoothness_constant_motion():
    base = np.zeros((2, 10))
    seq = [base + np.array([[3.0 * t], [4.0 * t]]) for t in range(6)]
    assert smoothness(seq) == pytest.approx(5.0)
    assert smoothness(seq[:1]) == 0.0
