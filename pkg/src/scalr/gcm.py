"""Global context memory: a per-head SwiGLU-style fast-weight network that is
trained at test time on each chunk's key/value tokens and then queried.

The fast-weight network for one head is::

    f(x) = W2 @ (silu(W1 @ x) * (W3 @ x))

with ``W1, W3`` of shape ``(hd*k, hd)`` and ``W2`` of shape ``(hd, hd*k)``.
The inner objective over a chunk of ``M`` tokens is the learning-rate
weighted negative dot product ``sum_i -eta_i * f(k_i) . v_i`` and the
update is a single plain gradient step ``W <- W - grad``.
"""
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import serialization
from .errors import ConfigError, ShapeError
from .numkit import matmul, silu, silu_prime, softplus

__all__ = [
    "GcmConfig",
    "FastWeights",
    "GcmProjections",
    "GcmState",
    "init_gcm",
    "state_size",
    "project_qkv",
    "predict_lr",
    "fast_forward",
    "inner_loss",
    "inner_gradient",
    "apply_gradient",
    "gcm_apply",
    "gated_residual",
    "gcm_step",
    "save_gcm",
    "load_gcm",
]


@dataclass(frozen=True)
class GcmConfig:
    d: int
    n_heads: int = 1
    expansion: int = 4
    base_lr: float = 1e-3
    gate_init: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.n_heads < 1:
            raise ConfigError("d and n_heads must be positive")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.expansion < 1:
            raise ConfigError("expansion factor k must be >= 1")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")

    @property
    def head_dim(self):
        return self.d // self.n_heads

    @property
    def hidden_dim(self):
        return self.head_dim * self.expansion


@dataclass
class FastWeights:
    """Inner-loop state; every array carries a leading head axis."""

    w1: np.ndarray  # (nh, hd*k, hd)
    w2: np.ndarray  # (nh, hd, hd*k)
    w3: np.ndarray  # (nh, hd*k, hd)

    def __post_init__(self):
        nh, hk, hd = np.shape(self.w1)
        if np.shape(self.w3) != (nh, hk, hd) or np.shape(self.w2) != (nh, hd, hk):
            raise ShapeError(
                f"inconsistent fast-weight shapes {np.shape(self.w1)}, "
                f"{np.shape(self.w2)}, {np.shape(self.w3)}"
            )

    @property
    def n_heads(self):
        return self.w1.shape[0]

    @property
    def head_dim(self):
        return self.w1.shape[2]

    @property
    def hidden_dim(self):
        return self.w1.shape[1]

    def blocks(self):
        return {"w1": self.w1, "w2": self.w2, "w3": self.w3}

    @property
    def size(self):
        return self.w1.size + self.w2.size + self.w3.size

    def zeros_like(self):
        return FastWeights(np.zeros_like(self.w1), np.zeros_like(self.w2), np.zeros_like(self.w3))

    def copy(self):
        return FastWeights(self.w1.copy(), self.w2.copy(), self.w3.copy())

    def _check_like(self, other):
        if (self.w1.shape, self.w2.shape) != (other.w1.shape, other.w2.shape):
            raise ShapeError("fast-weight shapes differ")

    def __add__(self, other):
        self._check_like(other)
        return FastWeights(self.w1 + other.w1, self.w2 + other.w2, self.w3 + other.w3)

    def __sub__(self, other):
        self._check_like(other)
        return FastWeights(self.w1 - other.w1, self.w2 - other.w2, self.w3 - other.w3)

    def __neg__(self):
        return FastWeights(-self.w1, -self.w2, -self.w3)

    def scale(self, factor):
        return FastWeights(factor * self.w1, factor * self.w2, factor * self.w3)

    def equals(self, other):
        """Bitwise equality of all three blocks."""
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.blocks().values(), other.blocks().values())
        )

    def checksum(self):
        h = hashlib.sha256()
        for arr in self.blocks().values():
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.blocks().values())


@dataclass
class GcmProjections:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    lr_w: np.ndarray
    lr_b: float
    alpha: np.ndarray


@dataclass
class GcmState:
    config: GcmConfig
    weights: FastWeights
    projections: GcmProjections = field(repr=False)


def state_size(config):
    """Elements in one fast-weight block across heads: ``nh * hd * hd * k``."""
    hd = config.head_dim
    return config.n_heads * hd * hd * config.expansion


def init_gcm(config):
    """Seeded initialisation; ``W2`` starts at zero so a fresh memory is a no-op."""
    rng = np.random.default_rng(config.seed)
    d, nh, hd, hk = config.d, config.n_heads, config.head_dim, config.hidden_dim
    bound = np.sqrt(3.0 / hd)
    w1 = rng.uniform(-bound, bound, size=(nh, hk, hd))
    w3 = rng.uniform(-bound, bound, size=(nh, hk, hd))
    w2 = np.zeros((nh, hd, hk))
    std = 1.0 / np.sqrt(d)
    proj = GcmProjections(
        wq=rng.normal(0.0, std, size=(d, d)),
        wk=rng.normal(0.0, std, size=(d, d)),
        wv=rng.normal(0.0, std, size=(d, d)),
        wo=rng.normal(0.0, std, size=(d, d)),
        lr_w=rng.normal(0.0, 0.1 * std, size=d),
        lr_b=0.0,
        alpha=np.full(d, float(config.gate_init)),
    )
    return FastWeights(w1, w2, w3), proj


def _tokens(x, d=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"token block must be (M, d) with M >= 1, got {x.shape}")
    if d is not None and x.shape[1] != d:
        raise ShapeError(f"token dim {x.shape[1]} != model dim {d}")
    return x


def _per_head(a, n_heads):
    """Accept ``(M, hd)`` for a single head or ``(M, nh, hd)``."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, None, :]
    if a.ndim != 3 or a.shape[1] != n_heads:
        raise ShapeError(f"expected (M, {n_heads}, hd) tokens, got {a.shape}")
    return a


def project_qkv(p, x, n_heads=1):
    x = _tokens(x, p.wq.shape[1])
    m, d = x.shape
    if d % n_heads:
        raise ShapeError(f"d={d} not divisible by {n_heads} heads")
    hd = d // n_heads
    q = matmul(x, p.wq.T).reshape(m, n_heads, hd)
    k = matmul(x, p.wk.T).reshape(m, n_heads, hd)
    v = matmul(x, p.wv.T).reshape(m, n_heads, hd)
    return q, k, v


def predict_lr(p, x, base_lr):
    x = _tokens(x, p.lr_w.shape[0])
    logits = matmul(x, p.lr_w[:, None])[:, 0] + p.lr_b
    return base_lr * softplus(logits)


def _head_forward(w1, w2, w3, x):
    """Forward one head on a token matrix ``x`` (M, hd); returns all intermediates."""
    h1 = matmul(x, w1.T)
    h3 = matmul(x, w3.T)
    a = silu(h1)
    z = a * h3
    y = matmul(z, w2.T)
    return h1, h3, a, z, y


def fast_forward(w, x, head=0):
    """Evaluate the fast-weight network of one head on a vector or token matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x[None, :] if single else x
    if xs.ndim != 2 or xs.shape[1] != w.head_dim:
        raise ShapeError(f"input dim {x.shape} does not match head dim {w.head_dim}")
    y = _head_forward(w.w1[head], w.w2[head], w.w3[head], xs)[-1]
    return y[0] if single else y


def inner_loss(w, k, v, eta):
    k = _per_head(k, w.n_heads)
    v = _per_head(v, w.n_heads)
    eta = np.asarray(eta, dtype=np.float64)
    if k.shape != v.shape or eta.shape != (k.shape[0],):
        raise ShapeError("K, V and eta shapes do not match")
    total = 0.0
    for h in range(w.n_heads):
        y = _head_forward(w.w1[h], w.w2[h], w.w3[h], k[:, h])[-1]
        dots = np.einsum("md,md->m", y, v[:, h])
        total += float(np.sum(-eta * dots))
    return total


def inner_gradient(w, k, v, eta):
    """Analytic gradient of :func:`inner_loss` with respect to ``(W1, W2, W3)``.

    Token contributions are accumulated in ascending token order.
    """
    k = _per_head(k, w.n_heads)
    v = _per_head(v, w.n_heads)
    eta = np.asarray(eta, dtype=np.float64)
    if k.shape != v.shape or eta.shape != (k.shape[0],):
        raise ShapeError("K, V and eta shapes do not match")
    g1 = np.empty_like(w.w1)
    g2 = np.empty_like(w.w2)
    g3 = np.empty_like(w.w3)
    for h in range(w.n_heads):
        kh = k[:, h]
        h1, h3, a, z, _ = _head_forward(w.w1[h], w.w2[h], w.w3[h], kh)
        dy = -eta[:, None] * v[:, h]
        g2[h] = matmul(dy.T, z)
        dz = matmul(dy, w.w2[h])
        dh1 = dz * h3 * silu_prime(h1)
        dh3 = dz * a
        g1[h] = matmul(dh1.T, kh)
        g3[h] = matmul(dh3.T, kh)
    return FastWeights(g1, g2, g3)


def apply_gradient(w, g):
    return w - g


def gcm_apply(w, q, wo):
    q = _per_head(q, w.n_heads)
    m = q.shape[0]
    heads = [fast_forward(w, q[:, h], head=h) for h in range(w.n_heads)]
    o = np.concatenate(heads, axis=1).reshape(m, -1)
    wo = np.asarray(wo, dtype=np.float64)
    if wo.shape != (o.shape[1], o.shape[1]):
        raise ShapeError(f"output projection {wo.shape} does not match d={o.shape[1]}")
    return matmul(o, wo.T)


def gated_residual(gcm_out, x, alpha):
    gcm_out = np.asarray(gcm_out, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if gcm_out.shape != x.shape or alpha.shape != (x.shape[-1],):
        raise ShapeError(
            f"gate shapes mismatch: out {gcm_out.shape}, x {x.shape}, alpha {alpha.shape}"
        )
    return alpha * gcm_out + x


def local_update(state, x):
    """Projections, learning rates and inner gradient for one token block."""
    cfg = state.config
    q, k, v = project_qkv(state.projections, x, cfg.n_heads)
    eta = predict_lr(state.projections, x, cfg.base_lr)
    return q, inner_gradient(state.weights, k, v, eta)


def gcm_step(state, x):
    """Update the memory on ``x``, then read it back with the queries of ``x``.

    Returns ``(new_weights, gated_output)``; ``state`` is left untouched.
    """
    x = _tokens(x, state.config.d)
    q, grad = local_update(state, x)
    new_w = apply_gradient(state.weights, grad)
    out = gcm_apply(new_w, q, state.projections.wo)
    return new_w, gated_residual(out, x, state.projections.alpha)


def _gcm_arrays(state, prefix=""):
    p = state.projections
    return {
        prefix + "w1": state.weights.w1,
        prefix + "w2": state.weights.w2,
        prefix + "w3": state.weights.w3,
        prefix + "wq": p.wq,
        prefix + "wk": p.wk,
        prefix + "wv": p.wv,
        prefix + "wo": p.wo,
        prefix + "lr_w": p.lr_w,
        prefix + "lr_b": np.array([p.lr_b]),
        prefix + "alpha": p.alpha,
        prefix + "base_lr": np.array([state.config.base_lr]),
        prefix + "gate_init": np.array([state.config.gate_init]),
    }


def _gcm_from_arrays(meta, arrays, prefix=""):
    cfg = GcmConfig(
        d=int(meta[prefix + "d"]),
        n_heads=int(meta[prefix + "n_heads"]),
        expansion=int(meta[prefix + "expansion"]),
        base_lr=float(arrays[prefix + "base_lr"][0]),
        gate_init=float(arrays[prefix + "gate_init"][0]),
        seed=int(meta[prefix + "seed"]),
    )
    a = arrays
    w = FastWeights(a[prefix + "w1"], a[prefix + "w2"], a[prefix + "w3"])
    p = GcmProjections(
        wq=a[prefix + "wq"], wk=a[prefix + "wk"], wv=a[prefix + "wv"], wo=a[prefix + "wo"],
        lr_w=a[prefix + "lr_w"], lr_b=float(a[prefix + "lr_b"][0]), alpha=a[prefix + "alpha"],
    )
    return GcmState(cfg, w, p)


def _gcm_meta(cfg, prefix=""):
    return {
        prefix + "d": cfg.d,
        prefix + "n_heads": cfg.n_heads,
        prefix + "expansion": cfg.expansion,
        prefix + "seed": cfg.seed,
    }


def save_gcm(path, state):
    serialization.save(path, "gcm", _gcm_meta(state.config), _gcm_arrays(state))


def load_gcm(path):
    kind, meta, arrays = serialization.load(path)
    if kind != "gcm":
        raise ShapeError(f"snapshot kind {kind!r} is not a gcm snapshot")
    return _gcm_from_arrays(meta, arrays)

