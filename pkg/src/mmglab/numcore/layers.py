"""Layer primitives used by the encoders and the fusion transformer."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import ConfigError, NumericError
from . import autograd as ag
from .autograd import Tensor, as_tensor


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is (in, out)."""
    x = as_tensor(x)
    if x.ndim == 1:
        out = ag.matmul(x.reshape(1, -1), weight).reshape(-1)
    else:
        out = ag.matmul(x, weight)
    return out if bias is None else out + bias


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise each row (last axis) to zero mean and unit variance, then
    apply the affine ``gain``/``bias``."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    ag._check_finite(xd, "layer_norm input")
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return ag._node(out, (x, gain, bias), backward, "layer_norm")


def multi_head_self_attention(tokens, params: Mapping[str, Tensor], heads: int) -> Tensor:
    """Scaled dot-product self-attention over the token axis (-2).

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo`` with weights of shape
    (D, D). No positional information is injected, so permuting the tokens
    permutes the output rows identically. The sequence is processed in a
    canonical order and mapped back, which keeps that equivariance exact in
    floating point.
    """
    x = as_tensor(tokens)
    order = ag.canonical_token_order(x)
    x = ag.permute_tokens(x, order)
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads
    lead = x.shape[:-2]
    t = x.shape[-2]

    def split(y: Tensor) -> Tensor:
        # (..., T, D) -> (..., H, T, dh)
        y = y.reshape(lead + (t, heads, dh))
        return ag.swapaxes(y, -2, -3)

    q = split(linear(x, params["wq"], params["bq"]))
    k = split(linear(x, params["wk"], params["bk"]))
    v = split(linear(x, params["wv"], params["bv"]))
    scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    weights = ag.softmax(scores, axis=-1)
    ctx = ag.matmul(weights, v)
    ctx = ag.swapaxes(ctx, -2, -3).reshape(lead + (t, d))
    out = linear(ctx, params["wo"], params["bo"])
    return ag.permute_tokens(out, ag.inverse_order(order))


def feed_forward(x, params: Mapping[str, Tensor]) -> Tensor:
    h = ag.gelu(linear(x, params["w1"], params["b1"]))
    return linear(h, params["w2"], params["b2"])


def transformer_block(x, params: Mapping[str, Tensor], heads: int, eps: float = 1e-5) -> Tensor:
    """Pre-norm residual block: attention then feed-forward."""
    h = layer_norm(x, params["ln1.g"], params["ln1.b"], eps)
    x = x + multi_head_self_attention(h, _sub(params, "attn."), heads)
    h = layer_norm(x, params["ln2.g"], params["ln2.b"], eps)
    return x + feed_forward(h, _sub(params, "mlp."))


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two vectors (last axis)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ConfigError("cosine_similarity dimension mismatch")
    return (l2_normalize(a) * l2_normalize(b)).sum(axis=-1)


def l2_normalize(x) -> Tensor:
    x = as_tensor(x)
    sq = (x.data * x.data).sum(axis=-1, keepdims=True)
    if np.any(sq == 0):
        raise NumericError("cannot normalise a zero vector")
    return x / ag.sqrt(ag.sum_(ag.square(x), axis=-1, keepdims=True))


def sq_l2_distance(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ConfigError(f"sq_l2_distance dims differ: {a.shape} vs {b.shape}")
    return ag.square(a - b).sum(axis=-1)


def pairwise_sq_l2(queries, centroids) -> Tensor:
    """(M, D) x (N, D) -> (M, N) squared euclidean distances."""
    q, c = as_tensor(queries), as_tensor(centroids)
    if q.shape[-1] != c.shape[-1]:
        raise ConfigError("pairwise_sq_l2 dimension mismatch")
    diff = ag.reshape(q, (q.shape[0], 1, q.shape[1])) - ag.reshape(c, (1,) + c.shape)
    return ag.square(diff).sum(axis=-1)
