import numpy as np
import pytest

from splatdeform.camera import Camera, project_gaussian
from splatdeform.gaussians import SH_C0, GaussianSet, covariance_from_rotation_scale, logit
from splatdeform.rasterizer import (
    StaleContextError,
    rasterize_backward,
    rasterize_brute_force,
    rasterize_forward,
    read_f32,
    read_ppm,
    write_f32,
    write_ppm,
)

from .helpers import random_scene


def solid(n, rgb):
    f = np.zeros((n, 1, 3))
    f[:, 0, :] = (np.asarray(rgb, float) - 0.5) / SH_C0
    return f


def make_set(centers, scale, opacity, rgb):
    centers = np.atleast_2d(np.asarray(centers, float))
    n = len(centers)
    return GaussianSet(centers, np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), np.log(scale)),
                       logit(np.broadcast_to(np.asarray(opacity, float), (n,)).copy()), solid(n, rgb))


def hand_alpha(mu, scale, opacity, cam, px, py):
    """alpha' at pixel (px, py) from the camera-module projection only."""
    pg = project_gaussian(mu, covariance_from_rotation_scale([1, 0, 0, 0], [scale] * 3), cam)
    inv = np.linalg.inv(pg.cov2d)
    d = pg.mean - np.array([px, py], float)
    return min(0.99, opacity * np.exp(-0.5 * d @ inv @ d)), pg.depth


def test_empty_scene_is_background():
    cam = Camera.simple(40, 24, 30.0)
    bg = np.random.default_rng(0).uniform(size=(24, 40, 3))
    img, _ = rasterize_forward(GaussianSet.empty(), cam, bg)
    np.testing.assert_array_equal(img, bg)
    np.testing.assert_array_equal(rasterize_brute_force(GaussianSet.empty(), cam, bg), bg)


def test_background_shape_mismatch():
    cam = Camera.simple(16, 16, 10.0)
    with pytest.raises(ValueError):
        rasterize_forward(GaussianSet.empty(), cam, np.zeros((8, 16, 3)))


def test_single_gaussian_center_pixel():
    cam = Camera.simple(32, 32, 30.0)
    bg = np.full((32, 32, 3), 0.25)
    c = np.array([0.9, 0.4, 0.1])
    # opacity above the clamp so alpha' = 0.99 exactly at the centre pixel (16, 16)
    g = make_set([[0.0, 0.0, 3.0]], 0.05, 0.995, c)
    img, _ = rasterize_forward(g, cam, bg)
    np.testing.assert_allclose(img[16, 16], 0.99 * c + 0.01 * 0.25, atol=1e-12)


def test_two_gaussians_closed_form():
    cam = Camera.simple(24, 24, 20.0)
    bg = np.full((24, 24, 3), 0.1)
    mus = [np.array([0.05, 0.0, 2.0]), np.array([-0.08, 0.05, 3.0])]
    cols = [np.array([1.0, 0.2, 0.3]), np.array([0.1, 0.8, 0.5])]
    scales, ops = [0.15, 0.2], [0.6, 0.7]
    g = make_set(np.stack(mus), 1.0, 0.5, (0, 0, 0))
    g.log_scales = np.log(np.array([[scales[0]] * 3, [scales[1]] * 3]))
    g.opacity_logits = logit(np.array(ops))
    g.sh_coeffs = np.concatenate([solid(1, cols[0]), solid(1, cols[1])])
    img, _ = rasterize_forward(g, cam, bg)
    for py in range(0, 24, 3):
        for px in range(0, 24, 3):
            (a1, _), (a2, _) = (hand_alpha(mus[i], scales[i], ops[i], cam, px, py) for i in range(2))
            a1 = a1 if a1 >= 1 / 255 else 0.0
            a2 = a2 if a2 >= 1 / 255 else 0.0
            want = cols[0] * a1 + cols[1] * a2 * (1 - a1) + (1 - a1) * (1 - a2) * bg[py, px]
            np.testing.assert_allclose(img[py, px], want, atol=1e-12)


def test_tiled_matches_oracle_random():
    rng = np.random.default_rng(11)
    for _ in range(10):
        g, cam, bg = random_scene(rng, n=int(rng.integers(1, 200)), size=64)
        img, _ = rasterize_forward(g, cam, bg)
        assert np.abs(img - rasterize_brute_force(g, cam, bg)).max() <= 1e-6


def test_tiled_matches_oracle_full_cover():
    # every 3-sigma radius covers the whole image
    rng = np.random.default_rng(12)
    g, cam, bg = random_scene(rng, n=30, size=32, scale=(1.0, 2.0))
    img, _ = rasterize_forward(g, cam, bg)
    assert np.abs(img - rasterize_brute_force(g, cam, bg)).max() <= 1e-6


def test_weights_and_transmittance_sum_to_one():
    rng = np.random.default_rng(13)
    for _ in range(5):
        g, cam, bg = random_scene(rng, n=150, size=48)
        _, ctx = rasterize_forward(g, cam, bg)
        np.testing.assert_allclose(ctx.weight_sum + ctx.t_final, 1.0, atol=1e-6)


def test_insertion_order_invariance():
    rng = np.random.default_rng(14)
    g, cam, bg = random_scene(rng, n=120, size=48)
    perm = rng.permutation(len(g))
    a, _ = rasterize_forward(g, cam, bg)
    b, _ = rasterize_forward(g.subset(perm), cam, bg)
    np.testing.assert_array_equal(a, b)


def own_weight(g, target, cam):
    """Per-pixel compositing weight of Gaussian ``target``: white target, black
    elsewhere, black background."""
    h = g.copy()
    h.sh_coeffs = solid(len(h), (0, 0, 0))
    h.sh_coeffs[target] = solid(1, (1, 1, 1))[0]
    img, _ = rasterize_forward(h, cam, np.zeros((cam.height, cam.width, 3)))
    return img[..., 0]


def test_weight_monotone_in_opacity():
    rng = np.random.default_rng(15)
    g, cam, _ = random_scene(rng, n=15, size=32)
    for target in range(len(g)):
        before = own_weight(g, target, cam)
        h = g.copy()
        h.opacity_logits[target] += 0.7
        after = own_weight(h, target, cam)
        assert np.all(after >= before - 1e-12)


def test_float32_path_close_to_float64():
    rng = np.random.default_rng(16)
    g, cam, bg = random_scene(rng, n=100, size=48)
    a, _ = rasterize_forward(g, cam, bg)
    b, _ = rasterize_forward(g.astype(np.float32), cam, bg)
    assert b.dtype == np.float32
    assert np.abs(a - b).max() < 1e-3


def test_backward_zero_upstream():
    rng = np.random.default_rng(17)
    g, cam, bg = random_scene(rng, n=30, size=32)
    _, ctx = rasterize_forward(g, cam, bg)
    gr = rasterize_backward(ctx, np.zeros((32, 32, 3)))
    for arr in (gr.centers, gr.rotations, gr.scales, gr.opacities, gr.sh_coeffs):
        assert np.all(arr == 0)


def test_backward_stale_context():
    rng = np.random.default_rng(18)
    g, cam, bg = random_scene(rng, n=10, size=32)
    _, ctx = rasterize_forward(g, cam, bg)
    h = g.copy()
    h.centers[0, 0] += 0.01
    with pytest.raises(StaleContextError):
        rasterize_backward(ctx, np.ones((32, 32, 3)), h)


def test_backward_single_gaussian_opacity_fd():
    cam = Camera.simple(32, 32, 30.0)
    bg = np.full((32, 32, 3), 0.3)
    g = make_set([[0.0, 0.0, 3.0]], 0.1, 0.6, (0.8, 0.2, 0.5))
    go = np.zeros((32, 32, 3))
    go[16, 16, 0] = 1.0
    _, ctx = rasterize_forward(g, cam, bg)
    ana = rasterize_backward(ctx, go).opacities[0]

    def pix(alpha):
        h = g.copy()
        h.opacity_logits[0] = logit(alpha)
        return rasterize_forward(h, cam, bg)[0][16, 16, 0]

    eps = 1e-6
    num = (pix(0.6 + eps) - pix(0.6 - eps)) / (2 * eps)
    assert ana == pytest.approx(num, rel=1e-3)


def test_backward_activated_fd():
    """Gradients w.r.t. the activated attributes against central differences."""
    rng = np.random.default_rng(19)
    g, cam, bg = random_scene(rng, n=25, size=32)
    go = rng.normal(size=(32, 32, 3))
    _, ctx = rasterize_forward(g, cam, bg)
    gr = rasterize_backward(ctx, go, g)

    def loss(h):
        return float(np.sum(rasterize_forward(h, cam, bg)[0] * go))

    eps = 1e-6
    for i in range(0, 25, 4):
        for fld, getter, ana in (
            ("centers", lambda h: h.centers, gr.centers),
            ("sh_coeffs", lambda h: h.sh_coeffs, gr.sh_coeffs),
            ("rotations", lambda h: h.rotations, gr.rotations),
        ):
            for j in range(getter(g)[i].size):
                hp, hm = g.copy(), g.copy()
                getter(hp)[i].reshape(-1)[j] += eps
                getter(hm)[i].reshape(-1)[j] -= eps
                num = (loss(hp) - loss(hm)) / (2 * eps)
                a = ana[i].reshape(-1)[j]
                assert abs(a - num) <= max(1e-3 * max(abs(a), abs(num)), 1e-6), (fld, i, j, a, num)
        # activated scale: perturb s multiplicatively through log_scales
        for j in range(3):
            s = g.scales[i, j]
            hp, hm = g.copy(), g.copy()
            hp.log_scales[i, j] = np.log(s + eps)
            hm.log_scales[i, j] = np.log(s - eps)
            num = (loss(hp) - loss(hm)) / (2 * eps)
            a = gr.scales[i, j]
            assert abs(a - num) <= max(1e-3 * max(abs(a), abs(num)), 1e-6)


def test_backward_culled_gaussian_zero():
    cam = Camera.simple(32, 32, 30.0)
    g = make_set([[0.0, 0.0, 3.0], [0.0, 0.0, -3.0]], 0.1, 0.6, (0.5, 0.5, 0.5))
    _, ctx = rasterize_forward(g, cam, np.zeros((32, 32, 3)))
    gr = rasterize_backward(ctx, np.ones((32, 32, 3)))
    assert np.all(gr.centers[1] == 0) and gr.opacities[1] == 0 and not gr.hit[1]
    assert gr.hit[0] and gr.opacities[0] != 0


def test_image_io_roundtrip(tmp_path):
    rng = np.random.default_rng(20)
    img = rng.uniform(size=(10, 14, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n14 10\n255\n")
    write_f32(tmp_path / "a.f32", img)
    np.testing.assert_array_equal(read_f32(tmp_path / "a.f32", 14, 10), img.astype(np.float32))
    with pytest.raises(ValueError):
        read_f32(tmp_path / "a.f32", 14, 11)
