"""Embedding-driven deformation field.

Each Gaussian carries a learnable embedding z. Per frame, a shallow MLP maps
``enc(z) ++ audio ++ enc(expression)`` to per-Gaussian attribute offsets,
one linear head per deformed attribute.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .gaussians import GaussianSet, normalize_quaternion_grad, sh_basis_count

ATTRIBUTES = ("mu", "alpha", "r", "s", "f")
DEFAULT_MASK = ("mu", "alpha")
EXPR_DIM = 6

# GaussianSet field touched by each attribute head
ATTR_FIELD = {
    "mu": "centers",
    "alpha": "opacity_logits",
    "r": "rotations",
    "s": "log_scales",
    "f": "sh_coeffs",
}


class InvalidDeltaError(ValueError):
    pass


def parse_mask(mask) -> tuple:
    """Normalize an attribute mask to canonical order; accepts "mu,alpha" strings."""
    if isinstance(mask, str):
        mask = [m.strip() for m in mask.split(",") if m.strip()]
    mask = set(mask)
    unknown = mask - set(ATTRIBUTES)
    if unknown:
        raise ValueError(f"unknown deformable attributes: {sorted(unknown)}")
    return tuple(a for a in ATTRIBUTES if a in mask)


def mask_bits(mask) -> int:
    return sum(1 << ATTRIBUTES.index(a) for a in parse_mask(mask))


def mask_from_bits(bits: int) -> tuple:
    return tuple(a for i, a in enumerate(ATTRIBUTES) if bits >> i & 1)


@dataclass(frozen=True)
class PositionalEncoder:
    n_freqs: int
    include_input: bool = True

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.n_freqs + int(self.include_input))

    def __call__(self, v):
        return pos_encode(v, self.n_freqs, self.include_input)

    def backward(self, v, grad):
        """Gradient w.r.t. ``v`` given the gradient w.r.t. the encoding."""
        v = np.asarray(v, dtype=np.float64)
        d = v.shape[-1]
        out = np.zeros_like(v)
        off = 0
        if self.include_input:
            out += grad[..., :d]
            off = d
        for k in range(self.n_freqs):
            w = (2.0 ** k) * np.pi
            out += grad[..., off:off + d] * w * np.cos(w * v)
            out -= grad[..., off + d:off + 2 * d] * w * np.sin(w * v)
            off += 2 * d
        return out


def pos_encode(v, n_freqs: int, include_input: bool = True):
    """[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]."""
    if n_freqs < 0:
        raise ValueError("frequency count must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    parts = [v] if include_input else []
    for k in range(n_freqs):
        w = (2.0 ** k) * np.pi * v
        parts += [np.sin(w), np.cos(w)]
    if not parts:
        return np.zeros(v.shape[:-1] + (0,))
    return np.concatenate(parts, axis=-1)


def head_dims(sh_degree: int) -> dict:
    return {"mu": 3, "alpha": 1, "r": 4, "s": 3, "f": 3 * sh_basis_count(sh_degree)}


class DeformField:
    """Trunk of two ReLU layers plus one zero-initialized linear head per
    attribute in ``mask``."""

    def __init__(self, embedding_dim=32, audio_dim=8, expr_dim=EXPR_DIM, sh_degree=1, hidden=64,
                 z_freqs=4, e_freqs=2, include_input=True, mask=DEFAULT_MASK, seed=0):
        self.embedding_dim = embedding_dim
        self.audio_dim = audio_dim
        self.expr_dim = expr_dim
        self.sh_degree = sh_degree
        self.hidden = hidden
        self.mask = parse_mask(mask)
        self.enc_z = PositionalEncoder(z_freqs, include_input)
        self.enc_e = PositionalEncoder(e_freqs, include_input)
        self.seed = seed
        self.params = self._init_params(np.random.default_rng(seed))

    @property
    def input_dim(self) -> int:
        return self.enc_z.out_dim(self.embedding_dim) + self.audio_dim + self.enc_e.out_dim(self.expr_dim)

    @property
    def layer_dims(self) -> tuple:
        return (self.input_dim, self.hidden, self.hidden)

    def _init_params(self, rng) -> dict:
        params = {}
        dims = self.layer_dims
        for i in range(2):
            fan_in = dims[i]
            bound = np.sqrt(6.0 / fan_in)
            params[f"trunk.{i}.w"] = rng.uniform(-bound, bound, size=(fan_in, dims[i + 1]))
            params[f"trunk.{i}.b"] = np.zeros(dims[i + 1])
        for attr in self.mask:
            out = head_dims(self.sh_degree)[attr]
            params[f"head.{attr}.w"] = np.zeros((self.hidden, out))
            params[f"head.{attr}.b"] = np.zeros(out)
        return params

    def param_names(self) -> list:
        return list(self.params)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "DeformField":
        other = object.__new__(DeformField)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def config(self) -> dict:
        return dict(embedding_dim=self.embedding_dim, audio_dim=self.audio_dim, expr_dim=self.expr_dim,
                    sh_degree=self.sh_degree, hidden=self.hidden, z_freqs=self.enc_z.n_freqs,
                    e_freqs=self.enc_e.n_freqs, include_input=self.enc_z.include_input,
                    mask=self.mask, seed=self.seed)

    def forward(self, z, a, e):
        """Returns (deltas, cache). ``deltas`` maps each masked-in attribute to
        an (N, dim) array; attributes outside the mask are absent."""
        z = np.asarray(z, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        e = np.asarray(e, dtype=np.float64).reshape(-1)
        if z.ndim != 2 or z.shape[1] != self.embedding_dim:
            raise ValueError(f"embeddings of shape {z.shape} do not match dim {self.embedding_dim}")
        if a.shape[0] != self.audio_dim or e.shape[0] != self.expr_dim:
            raise ValueError(f"driving features of size {a.shape[0]}/{e.shape[0]} do not match "
                             f"{self.audio_dim}/{self.expr_dim}")
        p = self.params
        pz = self.enc_z(z)
        pe = self.enc_e(e)
        nz = pz.shape[1]
        w0 = p["trunk.0.w"]
        shared = a @ w0[nz:nz + self.audio_dim] + pe @ w0[nz + self.audio_dim:] + p["trunk.0.b"]
        h1_pre = pz @ w0[:nz] + shared
        h1 = np.maximum(h1_pre, 0.0)
        h2_pre = h1 @ p["trunk.1.w"] + p["trunk.1.b"]
        h2 = np.maximum(h2_pre, 0.0)
        deltas = {attr: h2 @ p[f"head.{attr}.w"] + p[f"head.{attr}.b"] for attr in self.mask}
        cache = dict(z=z, a=a, e=e, pz=pz, pe=pe, h1_pre=h1_pre, h1=h1, h2_pre=h2_pre, h2=h2)
        return deltas, cache

    def __call__(self, z, a, e):
        return self.forward(z, a, e)[0]

    def backward(self, cache, grad_deltas):
        """Reverse pass. Returns (param_grads, grad_z, grad_a, grad_e)."""
        p = self.params
        h2 = cache["h2"]
        grads = {}
        g_h2 = np.zeros_like(h2)
        for attr in self.mask:
            g = grad_deltas.get(attr)
            if g is None:
                g = np.zeros((h2.shape[0], p[f"head.{attr}.b"].shape[0]))
            grads[f"head.{attr}.w"] = h2.T @ g
            grads[f"head.{attr}.b"] = g.sum(axis=0)
            g_h2 += g @ p[f"head.{attr}.w"].T
        g_h2 *= cache["h2_pre"] > 0
        grads["trunk.1.w"] = cache["h1"].T @ g_h2
        grads["trunk.1.b"] = g_h2.sum(axis=0)
        g_h1 = (g_h2 @ p["trunk.1.w"].T) * (cache["h1_pre"] > 0)
        nz = cache["pz"].shape[1]
        da = self.audio_dim
        w0 = p["trunk.0.w"]
        s = g_h1.sum(axis=0)
        gw0 = np.empty_like(w0)
        gw0[:nz] = cache["pz"].T @ g_h1
        gw0[nz:nz + da] = np.outer(cache["a"], s)
        gw0[nz + da:] = np.outer(cache["pe"], s)
        grads["trunk.0.w"] = gw0
        grads["trunk.0.b"] = s
        grad_z = self.enc_z.backward(cache["z"], g_h1 @ w0[:nz].T)
        grad_a = w0[nz:nz + da] @ s
        grad_e = self.enc_e.backward(cache["e"], w0[nz + da:] @ s)
        return {k: grads[k] for k in self.params}, grad_z, grad_a, grad_e


def deform_forward(field: DeformField, z, a, e):
    return field.forward(z, a, e)


def deform_backward(field: DeformField, cache, grad_deltas):
    return field.backward(cache, grad_deltas)


def _offset(base, delta):
    # zero offsets leave the stored value untouched, bit for bit
    return np.where(delta == 0, base, base + delta)


def apply_deltas(canonical: GaussianSet, deltas: dict, mask=None) -> GaussianSet:
    """Deformed view of ``canonical``. Attributes outside ``mask`` share the
    canonical arrays."""
    mask = parse_mask(mask if mask is not None else tuple(deltas))
    n = len(canonical)
    upd = {}
    for attr in mask:
        d = deltas.get(attr)
        if d is None:
            continue
        if not np.all(np.isfinite(d)):
            raise InvalidDeltaError(f"non-finite delta for attribute {attr!r}")
        base = getattr(canonical, ATTR_FIELD[attr])
        if attr == "alpha":
            upd["opacity_logits"] = _offset(base, d.reshape(n))
        elif attr == "f":
            upd["sh_coeffs"] = _offset(base, d.reshape(base.shape))
        elif attr == "r":
            moved = np.any(d != 0, axis=1)
            q = base + d
            q = q / np.linalg.norm(q, axis=1, keepdims=True)
            upd["rotations"] = np.where(moved[:, None], q, base)
        else:
            upd[ATTR_FIELD[attr]] = _offset(base, d)
    return replace(canonical, **upd)


def apply_deltas_backward(canonical: GaussianSet, deltas: dict, grads: dict, mask=None):
    """Split gradients w.r.t. the deformed parameters into canonical and delta parts.

    ``grads`` maps GaussianSet field names to gradients on the deformed set.
    Returns (canonical_grads, delta_grads); unaffected fields pass straight through.
    """
    mask = parse_mask(mask if mask is not None else tuple(deltas))
    canon = dict(grads)
    g_delta = {}
    n = len(canonical)
    for attr in mask:
        if attr not in deltas:
            continue
        fld = ATTR_FIELD[attr]
        g = grads[fld]
        if attr == "r":
            d = deltas["r"]
            moved = np.any(d != 0, axis=1)
            through = normalize_quaternion_grad(canonical.rotations + d, g)
            g = np.where(moved[:, None], through, g)
            canon[fld] = g
        g_delta[attr] = g.reshape(n, -1)
    return canon, g_delta
