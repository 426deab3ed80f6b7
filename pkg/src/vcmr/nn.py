"""Model-building blocks on top of the autodiff engine.

Conventions: activations are [batch, length, hidden] everywhere, attention
masks are float arrays with 1 = attend / 0 = blocked, and blocked logits get
an additive -1e9 before softmax (exact zero weight after exponentiation at
float64). Transformer blocks use the post-layer-norm residual layout:
sublayer -> add -> norm.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_NEG = -1e9


class Params:
    """Insertion-ordered registry of named parameter tensors."""

    def __init__(self):
        self._tensors = {}

    def add(self, name, array):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(array)
        self._tensors[name] = t
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state_dict(self, state):
        for name, t in self._tensors.items():
            if name not in state:
                raise KeyError(f"missing parameter in state: {name}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


def linear(x, w, b=None):
    out = ad.matmul(x, w)
    return out if b is None else ad.add(out, b)


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.mean(ad.mul(xc, xc), axis=-1, keepdims=True)
    inv = ad.pow_const(ad.add(var, eps), -0.5)
    return ad.add(ad.mul(ad.mul(xc, inv), gamma), beta)


def add_attention_params(params, prefix, d, rng):
    for name in ("wq", "wk", "wv", "wo"):
        params.add(f"{prefix}.{name}", xavier_uniform(rng, d, d))
    for name in ("bq", "bk", "bv", "bo"):
        params.add(f"{prefix}.{name}", np.zeros(d))


def multi_head_attention(q, k, v, params, prefix, heads, mask=None):
    """Scaled dot-product attention, [B, L, D] activations.

    mask broadcasts to [B, Lq, Lk]; masked key positions contribute exactly
    zero weight.
    """
    d = q.shape[-1]
    if d % heads != 0:
        raise ad.ShapeError(f"hidden size {d} not divisible by {heads} heads")
    dh = d // heads

    def split_heads(x):
        b, length, _ = x.shape
        return ad.swapaxes(ad.reshape(x, (b, length, heads, dh)), 1, 2)

    qh = split_heads(linear(q, params[f"{prefix}.wq"], params[f"{prefix}.bq"]))
    kh = split_heads(linear(k, params[f"{prefix}.wk"], params[f"{prefix}.bk"]))
    vh = split_heads(linear(v, params[f"{prefix}.wv"], params[f"{prefix}.bv"]))
    scores = ad.mul(ad.matmul(qh, ad.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(dh))
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        m = np.broadcast_to(m, (q.shape[0], q.shape[1], k.shape[1]))
        scores = ad.add(scores, ((1.0 - m) * MASK_NEG)[:, None, :, :])
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, vh)
    b, _, lq, _ = ctx.shape
    merged = ad.reshape(ad.swapaxes(ctx, 1, 2), (b, lq, d))
    return linear(merged, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


class TransformerLayer:
    """Post-LN transformer layer, optionally with a cross-attention block.

    Block order: self-attention, (cross-attention,) feed-forward with ReLU;
    each block closes with residual add and layer norm.
    """

    def __init__(self, params, prefix, d, d_ff, heads, rng, cross=False):
        self.params = params
        self.prefix = prefix
        self.heads = heads
        self.cross = cross
        add_attention_params(params, f"{prefix}.attn", d, rng)
        params.add(f"{prefix}.ln1.g", np.ones(d))
        params.add(f"{prefix}.ln1.b", np.zeros(d))
        if cross:
            add_attention_params(params, f"{prefix}.xattn", d, rng)
            params.add(f"{prefix}.lnx.g", np.ones(d))
            params.add(f"{prefix}.lnx.b", np.zeros(d))
        params.add(f"{prefix}.ffn.w1", xavier_uniform(rng, d, d_ff))
        params.add(f"{prefix}.ffn.b1", np.zeros(d_ff))
        params.add(f"{prefix}.ffn.w2", xavier_uniform(rng, d_ff, d))
        params.add(f"{prefix}.ffn.b2", np.zeros(d))
        params.add(f"{prefix}.ln2.g", np.ones(d))
        params.add(f"{prefix}.ln2.b", np.zeros(d))

    def _ln(self, tag, x):
        return layer_norm(x, self.params[f"{self.prefix}.{tag}.g"], self.params[f"{self.prefix}.{tag}.b"])

    def __call__(self, x, mask=None, kv=None, kv_mask=None):
        p, pre = self.params, self.prefix
        att = multi_head_attention(x, x, x, p, f"{pre}.attn", self.heads, mask=mask)
        x = self._ln("ln1", ad.add(x, att))
        if self.cross:
            if kv is None:
                raise ValueError("cross-attention layer needs key/value input")
            xatt = multi_head_attention(x, kv, kv, p, f"{pre}.xattn", self.heads, mask=kv_mask)
            x = self._ln("lnx", ad.add(x, xatt))
        h = linear(x, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"])
        h = linear(ad.relu(h), p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"])
        return self._ln("ln2", ad.add(x, h))


def self_attention_mask(key_valid, query_len=None):
    """[B, Lq, Lk] mask from a [B, Lk] key-validity array."""
    kv = np.asarray(key_valid, dtype=np.float64)
    lq = kv.shape[1] if query_len is None else query_len
    return np.repeat(kv[:, None, :], lq, axis=1)


def diagonal_mask(batch, length):
    """Diagnostic mask: every position may attend only to itself."""
    return np.repeat(np.eye(length)[None, :, :], batch, axis=0)
