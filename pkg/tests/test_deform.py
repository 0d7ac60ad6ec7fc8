import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatdeform.deform import (
    ATTRIBUTES,
    DeformField,
    InvalidDeltaError,
    PositionalEncoder,
    apply_deltas,
    apply_deltas_backward,
    mask_bits,
    mask_from_bits,
    parse_mask,
    pos_encode,
)
from splatdeform.gaussians import GaussianSet
from splatdeform.rasterizer import rasterize_forward

from .helpers import random_scene


def test_pos_encode_zero():
    np.testing.assert_array_equal(pos_encode(np.array([0.0]), 2), [0, 0, 1, 0, 1])


def test_pos_encode_identity_at_l0():
    v = np.array([0.3, -0.7])
    np.testing.assert_array_equal(pos_encode(v, 0), v)


def test_pos_encode_half():
    np.testing.assert_allclose(pos_encode(np.array([0.5]), 1), [0.5, 1.0, 0.0], atol=1e-15)


def test_pos_encode_dims():
    enc = PositionalEncoder(3, include_input=False)
    assert enc.out_dim(5) == 30
    assert enc(np.zeros((7, 5))).shape == (7, 30)
    with pytest.raises(ValueError):
        pos_encode(np.zeros(2), -1)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1, exclude_max=True), st.floats(-1, 1, exclude_max=True), st.integers(1, 4))
def test_pos_encode_injective(a, b, n_freqs):
    if a != b:
        assert not np.array_equal(pos_encode(np.array([a]), n_freqs), pos_encode(np.array([b]), n_freqs))


def test_mask_parsing():
    assert parse_mask("alpha, mu") == ("mu", "alpha")
    assert mask_from_bits(mask_bits(("f", "mu"))) == ("mu", "f")
    with pytest.raises(ValueError):
        parse_mask("mu,theta")


def test_input_dim_default():
    f = DeformField()
    # 32*(2*4+1) + 8 + 6*(2*2+1)
    assert f.input_dim == 326
    assert f.layer_dims == (326, 64, 64)


def test_zero_heads_zero_deltas():
    rng = np.random.default_rng(0)
    f = DeformField(mask=ATTRIBUTES)
    d = f(rng.normal(size=(10, 32)), rng.normal(size=8), rng.uniform(0, 5, 6))
    assert set(d) == set(ATTRIBUTES)
    for v in d.values():
        assert np.all(v == 0)


def test_mask_limits_heads():
    f = DeformField(mask=("mu", "alpha"))
    d = f(np.zeros((3, 32)), np.zeros(8), np.zeros(6))
    assert set(d) == {"mu", "alpha"}
    assert not any(k.startswith("head.r") or k.startswith("head.s") or k.startswith("head.f") for k in f.params)


def test_tiny_network_closed_form():
    f = DeformField(embedding_dim=1, audio_dim=1, expr_dim=1, hidden=1, z_freqs=0, e_freqs=0, mask=("alpha",))
    f.params["trunk.0.w"] = np.array([[0.5], [-1.0], [2.0]])
    f.params["trunk.0.b"] = np.array([0.1])
    f.params["trunk.1.w"] = np.array([[3.0]])
    f.params["trunk.1.b"] = np.array([-0.2])
    f.params["head.alpha.w"] = np.array([[0.7]])
    f.params["head.alpha.b"] = np.array([0.05])
    z, a, e = 0.8, 0.3, 0.4
    h1 = max(0.5 * z - 1.0 * a + 2.0 * e + 0.1, 0)
    h2 = max(3.0 * h1 - 0.2, 0)
    want = 0.7 * h2 + 0.05
    got = f(np.array([[z]]), np.array([a]), np.array([e]))["alpha"][0, 0]
    assert abs(got - want) <= 1e-12


def test_shape_mismatch():
    f = DeformField()
    with pytest.raises(ValueError):
        f(np.zeros((3, 16)), np.zeros(8), np.zeros(6))
    with pytest.raises(ValueError):
        f(np.zeros((3, 32)), np.zeros(7), np.zeros(6))


def perturbed_field(seed=0, mask=ATTRIBUTES, **kw):
    rng = np.random.default_rng(seed)
    f = DeformField(embedding_dim=5, audio_dim=3, hidden=8, z_freqs=2, e_freqs=1, mask=mask, sh_degree=1, **kw)
    for k in f.params:
        f.params[k] = f.params[k] + rng.normal(0, 0.3, f.params[k].shape)
    return f


def test_backward_zero_upstream():
    f = perturbed_field()
    rng = np.random.default_rng(1)
    d, cache = f.forward(rng.normal(size=(4, 5)), rng.normal(size=3), rng.normal(size=6))
    grads, gz, ga, ge = f.backward(cache, {k: np.zeros_like(v) for k, v in d.items()})
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(gz == 0) and np.all(ga == 0) and np.all(ge == 0)


def fd_check(fn, x, ana, eps=1e-6, rtol=1e-4):
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        lp = fn()
        flat[i] = old - eps
        lm = fn()
        flat[i] = old
        num = (lp - lm) / (2 * eps)
        a = ana.reshape(-1)[i]
        assert abs(a - num) <= max(rtol * max(abs(a), abs(num)), 1e-8), (i, a, num)


def test_backward_matches_fd():
    f = perturbed_field(2)
    rng = np.random.default_rng(3)
    z, a, e = rng.normal(size=(4, 5)), rng.normal(size=3), rng.uniform(0, 1, 6)
    w = {k: rng.normal(size=v.shape) for k, v in f(z, a, e).items()}

    def loss():
        return sum(float(np.sum(v * w[k])) for k, v in f(z, a, e).items())

    d, cache = f.forward(z, a, e)
    grads, gz, ga, ge = f.backward(cache, w)
    for k in f.params:
        fd_check(loss, f.params[k], grads[k])
    fd_check(loss, z, gz)
    fd_check(loss, a, ga)
    fd_check(loss, e, ge)


def test_identity_deltas_bit_exact():
    rng = np.random.default_rng(4)
    g, _, _ = random_scene(rng, n=20)
    zeros = {"mu": np.zeros((20, 3)), "alpha": np.zeros((20, 1)), "r": np.zeros((20, 4)),
             "s": np.zeros((20, 3)), "f": np.zeros((20, 12))}
    out = apply_deltas(g, zeros, ATTRIBUTES)
    assert out.equals(g)


def test_uniform_center_shift():
    rng = np.random.default_rng(5)
    g, _, _ = random_scene(rng, n=6)
    out = apply_deltas(g, {"mu": np.tile([1.0, 0, 0], (6, 1))}, ("mu",))
    np.testing.assert_array_equal(out.centers[:, 0], g.centers[:, 0] + 1.0)
    np.testing.assert_array_equal(out.centers[:, 1:], g.centers[:, 1:])


def test_large_opacity_delta_saturates_below_one():
    g = GaussianSet.from_activated(np.zeros((1, 3)), 0.1, 0.5)
    out = apply_deltas(g, {"alpha": np.array([[30.0]])}, ("alpha",))
    assert 0.999 < out.opacities[0] < 1.0


def test_non_finite_delta_rejected():
    g = GaussianSet.from_activated(np.zeros((1, 3)), 0.1, 0.5)
    with pytest.raises(InvalidDeltaError):
        apply_deltas(g, {"mu": np.array([[np.nan, 0, 0]])}, ("mu",))


def test_rotation_delta_renormalized():
    g = GaussianSet.from_activated(np.zeros((2, 3)), 0.1, 0.5)
    out = apply_deltas(g, {"r": np.array([[0.0, 1.0, 0, 0], [0, 0, 0, 0]])}, ("r",))
    np.testing.assert_allclose(np.linalg.norm(out.rotations, axis=1), 1.0)
    np.testing.assert_array_equal(out.rotations[1], g.rotations[1])


@pytest.mark.parametrize("mask", [("mu",), ("mu", "alpha"), ("r", "s"), ("f",), ATTRIBUTES])
def test_mask_invariance(mask):
    rng = np.random.default_rng(6)
    g, _, _ = random_scene(rng, n=12, emb_dim=5)
    f = perturbed_field(7, mask=mask)
    out = apply_deltas(g, f(g.embeddings, rng.normal(size=3), rng.normal(size=6)), f.mask)
    touched = {"mu": "centers", "alpha": "opacity_logits", "r": "rotations", "s": "log_scales", "f": "sh_coeffs"}
    for attr, fld in touched.items():
        same = np.array_equal(getattr(out, fld), getattr(g, fld))
        assert same == (attr not in mask)
    assert out.embeddings is g.embeddings


def test_identity_render_at_init():
    rng = np.random.default_rng(8)
    g, cam, bg = random_scene(rng, n=60, emb_dim=32)
    f = DeformField(mask=ATTRIBUTES, audio_dim=8)
    ref, _ = rasterize_forward(g, cam, bg)
    for _ in range(3):
        out = apply_deltas(g, f(g.embeddings, rng.normal(size=8) * 10, rng.uniform(0, 5, 6)), f.mask)
        img, _ = rasterize_forward(out, cam, bg)
        assert img.tobytes() == ref.tobytes()


def test_apply_deltas_backward_rotation_fd():
    rng = np.random.default_rng(9)
    g, _, _ = random_scene(rng, n=3)
    d = {"r": rng.normal(0, 0.2, (3, 4))}
    w = rng.normal(size=(3, 4))
    canon, gd = apply_deltas_backward(g, d, {"rotations": w}, ("r",))

    def loss():
        return float(np.sum(apply_deltas(g, d, ("r",)).rotations * w))

    fd_check(loss, d["r"], gd["r"])
    fd_check(loss, g.rotations, canon["rotations"])


def test_embedding_gradient_flows_once_heads_perturbed():
    rng = np.random.default_rng(10)
    f = DeformField(embedding_dim=4, audio_dim=2, hidden=8, mask=("mu",), seed=1)
    z = rng.normal(size=(5, 4))
    d, cache = f.forward(z, rng.normal(size=2), rng.normal(size=6))
    _, gz, _, _ = f.backward(cache, {"mu": np.ones((5, 3))})
    assert np.all(gz == 0)
    f.params["head.mu.w"] = rng.normal(0, 0.1, f.params["head.mu.w"].shape)
    d, cache = f.forward(z, rng.normal(size=2), rng.normal(size=6))
    _, gz, _, _ = f.backward(cache, {"mu": np.ones((5, 3))})
    assert np.any(gz != 0)
