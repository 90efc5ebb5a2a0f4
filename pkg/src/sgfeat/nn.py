"""Small numpy building blocks shared by the encoders: linear layers, row
normalisation, multi-head attention and sinusoidal embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidShape

NORM_EPS = 1e-9


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    """(n_in, n_out) matrix with orthonormal rows or columns, scaled by ``gain``."""
    a = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q


def row_normalize(x: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance rows (feature-wise normalisation, no affine)."""
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + NORM_EPS)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


@dataclass(frozen=True)
class Linear:
    weight: np.ndarray          # (in, out)
    bias: np.ndarray | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.weight.shape[0]:
            raise InvalidShape(f"linear layer expects width {self.weight.shape[0]}, got {x.shape[-1]}")
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y

    @classmethod
    def init(cls, rng, n_in, n_out, gain=1.0, bias=True) -> "Linear":
        return cls(orthogonal(rng, n_in, n_out, gain), np.zeros(n_out) if bias else None)


@dataclass(frozen=True)
class MLPLayer:
    """Linear map, optionally followed by row normalisation and a rectifier."""

    linear: Linear
    normalize: bool = True
    relu: bool = True

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = self.linear(x)
        if self.normalize:
            y = row_normalize(y)
        if self.relu:
            y = np.maximum(y, 0.0)
        return y

    @classmethod
    def init(cls, rng, n_in, n_out, gain=1.0) -> "MLPLayer":
        return cls(Linear.init(rng, n_in, n_out, gain))


@dataclass(frozen=True)
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    heads: int = 4
    bias_proj: np.ndarray | None = None   # projection of a pairwise embedding added to keys

    def __post_init__(self):
        d = self.wq.shape[0]
        for m in (self.wq, self.wk, self.wv):
            if m.shape != (d, d):
                raise InvalidShape("attention projections must be square and equal-sized")
        if d % self.heads:
            raise InvalidShape(f"width {d} not divisible by {self.heads} heads")
        if self.bias_proj is not None and self.bias_proj.shape != (d, d):
            raise InvalidShape("bias projection must be d x d")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, rng, d, heads=4, value_gain=1.0, with_bias=False, bias_gain=1.0) -> "AttentionWeights":
        wq = orthogonal(rng, d, d)
        wk = orthogonal(rng, d, d)
        wv = orthogonal(rng, d, d, value_gain)
        bp = orthogonal(rng, d, d, bias_gain) if with_bias else None
        return cls(wq, wk, wv, heads, bp)


def softmax(e: np.ndarray, axis: int = -1) -> np.ndarray:
    e = e - e.max(axis=axis, keepdims=True)
    p = np.exp(e)
    return p / p.sum(axis=axis, keepdims=True)


def attention_scores(x_q, x_kv, w: AttentionWeights, bias_emb=None):
    """Pre-softmax scores (h, n, m) and values (h, m, d/h).

    ``bias_emb`` is an (n, m, d) pairwise embedding; its projection through
    ``w.bias_proj`` is added to every key before the dot product.
    """
    n, d = x_q.shape
    m = x_kv.shape[0]
    h = w.heads
    dh = d // h
    q = (x_q @ w.wq).reshape(n, h, dh).transpose(1, 0, 2)
    k = (x_kv @ w.wk).reshape(m, h, dh).transpose(1, 0, 2)
    v = (x_kv @ w.wv).reshape(m, h, dh).transpose(1, 0, 2)
    e = q @ k.transpose(0, 2, 1)
    if bias_emb is not None and w.bias_proj is not None:
        if bias_emb.shape != (n, m, d):
            raise InvalidShape(f"pairwise embedding must be {(n, m, d)}, got {bias_emb.shape}")
        # q_i . (b_ij P) computed as b_ij . (P q_i) per head, without forming b P
        proj = w.bias_proj.reshape(d, h, dh).transpose(1, 0, 2)        # (h, d, dh)
        u = np.einsum("hde,hne->hnd", proj, q)                        # (h, n, d)
        e = e + np.matmul(bias_emb, u.transpose(1, 2, 0)).transpose(2, 0, 1)
    return e / np.sqrt(dh), v


def attention(x_q, x_kv, w: AttentionWeights, bias_emb=None, return_weights=False):
    """Multi-head attention followed by residual add and row normalisation."""
    x_q = np.asarray(x_q, dtype=np.float64)
    x_kv = np.asarray(x_kv, dtype=np.float64)
    if x_q.shape[-1] != w.width or x_kv.shape[-1] != w.width:
        raise InvalidShape("feature width does not match attention weights")
    e, v = attention_scores(x_q, x_kv, w, bias_emb)
    a = softmax(e, axis=-1)
    z = (a @ v).transpose(1, 0, 2).reshape(x_q.shape[0], -1)
    out = row_normalize(x_q + z)
    return (out, a) if return_weights else out


def sinusoidal_embedding(x, d: int, base: float) -> np.ndarray:
    """Interleaved sin/cos features: [2m] = sin(x / base^(2m/d)), [2m+1] = cos(...)."""
    x = np.asarray(x, dtype=np.float64)
    freq = 1.0 / np.power(float(base), 2.0 * np.arange(d // 2) / d)
    arg = x[..., None] * freq
    out = np.empty(x.shape + (d,))
    out[..., 0:2 * (d // 2):2] = np.sin(arg)
    out[..., 1:2 * (d // 2):2] = np.cos(arg)
    if d % 2:
        out[..., -1] = 0.0
    return out
