import re

import numpy as np
import pytest

from splatdeform.camera import project_point
from splatdeform.deform import DeformField
from splatdeform.gaussians import GaussianSet, eval_sh_color
from splatdeform.rasterizer import rasterize_brute_force
from splatdeform.scene_io import (
    GROUP_LOWER_LIP,
    GROUP_UPPER_LIP,
    Checkpoint,
    CheckpointError,
    PlyError,
    PointCloud,
    SynthConfig,
    checkpoint_bytes,
    checkpoint_from_bytes,
    checkpoint_load,
    checkpoint_save,
    downsample_pointcloud,
    init_gaussians_from_cloud,
    lip_gap,
    load_dataset,
    load_gt_scene,
    load_ply,
    measure_aperture_gap,
    read_keyvalue,
    save_ply,
    split_indices,
    synth_deform,
    synth_scene_generate,
)


@pytest.fixture(scope="module")
def small_synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    res = synth_scene_generate(SynthConfig(frames=22, seed=3), out)
    return res, out


def test_ply_minimal_ascii(tmp_path):
    p = tmp_path / "one.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n")
    pc = load_ply(p)
    assert len(pc) == 1
    np.testing.assert_array_equal(pc.positions, [[0, 0, 0]])


def test_ply_binary_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    pc = PointCloud(rng.normal(size=(1000, 3)), rng.integers(0, 256, (1000, 3)))
    save_ply(pc, tmp_path / "a.ply")
    back = load_ply(tmp_path / "a.ply")
    assert back.positions.tobytes() == pc.positions.tobytes()
    np.testing.assert_array_equal(back.colors, pc.colors)


def test_ply_float32_and_ascii_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    pc = PointCloud(rng.normal(size=(20, 3)).astype(np.float32), rng.integers(0, 256, (20, 3)),
                    {"quality": rng.normal(size=20)})
    save_ply(pc, tmp_path / "b.ply", binary=False)
    back = load_ply(tmp_path / "b.ply")
    assert back.positions.dtype == np.float32
    np.testing.assert_array_equal(back.positions, pc.positions)
    np.testing.assert_array_equal(back.extra["quality"], pc.extra["quality"])


def test_ply_truncated_ascii(tmp_path):
    p = tmp_path / "t.ply"
    rows = "\n".join("1 2 3" for _ in range(4))
    p.write_text("ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\n"
                 f"property float z\nend_header\n{rows}\n")
    with pytest.raises(PlyError, match="5 vertices"):
        load_ply(p)


def test_ply_truncated_binary(tmp_path):
    pc = PointCloud(np.zeros((5, 3)))
    save_ply(pc, tmp_path / "t.ply")
    raw = (tmp_path / "t.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(raw[:-10])
    with pytest.raises(PlyError, match="offset"):
        load_ply(tmp_path / "t.ply")


@pytest.mark.parametrize("header,msg", [
    ("plx\n", "magic"),
    ("ply\nformat binary_big_endian 1.0\nend_header\n", "unsupported format"),
    ("ply\nformat ascii 1.0\nelement face 1\nend_header\n", "unsupported element"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty list uchar int idx\nend_header\n", "line 4"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n0\n", "lacks property"),
])
def test_ply_malformed_header(tmp_path, header, msg):
    p = tmp_path / "bad.ply"
    p.write_text(header)
    with pytest.raises(PlyError, match=msg):
        load_ply(p)


def test_downsample():
    rng = np.random.default_rng(2)
    small = PointCloud(rng.normal(size=(50, 3)))
    assert downsample_pointcloud(small, 100) is small
    big = PointCloud(rng.normal(size=(200_000, 3)))
    a = downsample_pointcloud(big, seed=7)
    b = downsample_pointcloud(big, seed=7)
    assert len(a) == 100_000
    np.testing.assert_array_equal(a.positions, b.positions)
    # every kept point is an original point
    orig = {tuple(r) for r in big.positions[:]}
    assert all(tuple(r) in orig for r in a.positions[::997])
    assert len({tuple(r) for r in a.positions}) == 100_000


def test_init_single_point():
    g = init_gaussians_from_cloud(PointCloud(np.zeros((1, 3))), 8, default_scale=0.02)
    np.testing.assert_allclose(g.scales, 0.02)
    assert g.embedding_dim == 8


def test_init_grid_spacing():
    h = 0.05
    xs = np.arange(10) * h
    grid = np.stack(np.meshgrid(xs, xs, xs), axis=-1).reshape(-1, 3)
    g = init_gaussians_from_cloud(PointCloud(grid), 4)
    interior = np.all((grid > h / 2) & (grid < xs[-1] - h / 2), axis=1)
    np.testing.assert_allclose(g.scales[interior], h, rtol=1e-9)
    np.testing.assert_allclose(g.opacities, 0.1)
    np.testing.assert_array_equal(g.rotations, np.tile([1.0, 0, 0, 0], (len(grid), 1)))


def test_init_color_and_embeddings():
    pc = PointCloud(np.array([[0.0, 0, 0], [1, 0, 0]]), np.array([[255, 0, 0], [0, 0, 255]]))
    g = init_gaussians_from_cloud(pc, 32, seed=1, sh_degree=1)
    rgb = eval_sh_color(g.sh_coeffs[0], np.array([0, 0, 1.0]), 1)
    np.testing.assert_allclose(rgb, [1, 0, 0], atol=1e-12)
    assert np.all(g.sh_coeffs[:, 1:] == 0)
    assert abs(g.embeddings.std() - 0.01) < 0.005
    g2 = init_gaussians_from_cloud(pc, 32, seed=1, sh_degree=1)
    np.testing.assert_array_equal(g.embeddings, g2.embeddings)


def test_split_ratio():
    tr, te = split_indices(220, 10)
    assert len(tr) == 200 and len(te) == 20
    assert set(tr).isdisjoint(te) and set(tr) | set(te) == set(range(220))


def test_synth_validation():
    with pytest.raises(ValueError):
        SynthConfig(frames=10).validate()


def test_synth_dataset_roundtrip(small_synth):
    res, out = small_synth
    ds = load_dataset(out)
    assert len(ds) == 22 and len(ds.train_indices) == 20 and len(ds.test_indices) == 2
    assert ds.audio.tobytes() == res.dataset.audio.tobytes()
    assert ds.expr.tobytes() == res.dataset.expr.tobytes()
    np.testing.assert_array_equal(ds.mouth_rects, res.dataset.mouth_rects)
    np.testing.assert_allclose(ds.images, res.dataset.images, atol=1e-7)
    m = read_keyvalue(out / "manifest.txt")
    for key in ("frames", "width", "height", "d_a", "split_ratio", "background", "camera.fx", "camera.fy",
                "camera.cx", "camera.cy", "camera.w2c.0", "camera.w2c.1", "camera.w2c.2"):
        assert key in m
    np.testing.assert_array_equal(ds.camera.w2c, res.dataset.camera.w2c)


def test_synth_deterministic(small_synth, tmp_path):
    res, out = small_synth
    again = synth_scene_generate(SynthConfig(frames=22, seed=3), tmp_path)
    assert again.dataset.images.tobytes() == res.dataset.images.tobytes()
    for name in ("features.csv", "manifest.txt", "canonical.ply", "gt_scene.ply", "frames/frame_0005.ppm"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_synth_rerender_from_point_cloud(small_synth):
    res, out = small_synth
    scene, groups = load_gt_scene(out / "gt_scene.ply")
    ds = load_dataset(out)
    for n in (0, 7, 21):
        posed = synth_deform(scene, groups, ds.audio[n], ds.expr[n], res.config)
        img = rasterize_brute_force(posed, ds.camera, ds.background)
        assert np.abs(img - ds.images[n]).max() <= 1e-6


def test_synth_static_driver():
    res = synth_scene_generate(SynthConfig(frames=22, driver="zero"))
    imgs = res.dataset.images
    assert all(imgs[n].tobytes() == imgs[0].tobytes() for n in range(22))


def test_synth_gap_monotone():
    cfg = SynthConfig(frames=22, driver="ramp")
    res = synth_scene_generate(cfg)
    ds = res.dataset
    gaps = lip_gap(ds.audio[:, 0], cfg)
    assert np.all(np.diff(gaps) > 0)
    measured = [measure_aperture_gap(ds.images[n], ds.background, ds.mouth_rects[n]) for n in range(22)]
    assert np.all(np.diff(measured) > 0)


def test_mouth_rect_contains_aperture(small_synth):
    res, _ = small_synth
    ds = res.dataset
    lips = (res.groups == GROUP_UPPER_LIP) | (res.groups == GROUP_LOWER_LIP)
    for n in range(len(ds)):
        posed = synth_deform(res.scene, res.groups, ds.audio[n], ds.expr[n], res.config)
        x0, y0, x1, y1 = ds.mouth_rects[n]
        uv = np.array([project_point(p, ds.camera)[:2] for p in posed.centers[lips]])
        inside = (uv[:, 0] >= x0) & (uv[:, 0] < x1) & (uv[:, 1] >= y0) & (uv[:, 1] < y1)
        assert inside.mean() >= 0.9


def random_checkpoint(seed=0, n=30):
    rng = np.random.default_rng(seed)
    g = GaussianSet(rng.normal(size=(n, 3)), rng.normal(size=(n, 4)), rng.normal(size=(n, 3)),
                    rng.normal(size=n), rng.normal(size=(n, 4, 3)), rng.normal(size=(n, 16)))
    f = DeformField(embedding_dim=16, audio_dim=5, mask=("mu", "s", "f"), seed=seed)
    for k in f.params:
        f.params[k] = rng.normal(size=f.params[k].shape)
    return Checkpoint(g.astype(np.float32), f, iteration=1234, seed=seed)


def test_checkpoint_roundtrip(tmp_path):
    ck = random_checkpoint()
    size = checkpoint_save(ck, tmp_path / "a.spld")
    assert size == (tmp_path / "a.spld").stat().st_size
    back = checkpoint_load(tmp_path / "a.spld")
    assert back.gaussians.equals(ck.gaussians)
    assert back.iteration == 1234 and back.seed == 0
    assert back.field.mask == ("mu", "s", "f")
    for k in ck.field.params:
        assert back.field.params[k].tobytes() == ck.field.params[k].astype(np.float32).tobytes()
    assert checkpoint_bytes(back) == (tmp_path / "a.spld").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_bad_magic():
    raw = bytearray(checkpoint_bytes(random_checkpoint()))
    raw[:4] = b"XXXX"
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_from_bytes(bytes(raw))


def test_checkpoint_bad_version():
    raw = bytearray(checkpoint_bytes(random_checkpoint()))
    raw[4] = 9
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_from_bytes(bytes(raw))


def test_checkpoint_truncated():
    raw = checkpoint_bytes(random_checkpoint())
    with pytest.raises(CheckpointError) as info:
        checkpoint_from_bytes(raw[:-7])
    m = re.search(r"expected (\d+) bytes, found (\d+)", str(info.value))
    expected, found = int(m.group(1)), int(m.group(2))
    assert expected - found == 7
