"""Numpy building blocks with explicit backward passes.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the cache and the upstream gradient and returns the input gradient,
adding parameter gradients into a ``grads`` dict keyed by parameter name.
Weights are stored ``(in, out)`` so a linear map is ``x @ W + b``.
"""

from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def accumulate(grads: dict, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g.copy()


def linear_forward(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y


def linear_backward(dy, x, w, grads, wname, bname=None):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    accumulate(grads, wname, x2.T @ dy2)
    if bname is not None:
        accumulate(grads, bname, dy2.sum(axis=0))
    return dy @ w.T


def layernorm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layernorm_backward(dy, cache, grads, gname, bname):
    xhat, rstd, g = cache
    d = dy.shape[-1]
    accumulate(grads, gname, (dy * xhat).reshape(-1, d).sum(axis=0))
    accumulate(grads, bname, dy.reshape(-1, d).sum(axis=0))
    dxhat = dy * g
    return rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def gelu_forward(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def elu_forward(x, alpha=1.0):
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    return np.where(x > 0, x, neg), x


def elu_backward(dy, x, alpha=1.0):
    return dy * np.where(x > 0, 1.0, alpha * np.exp(np.minimum(x, 0.0)))


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _split_heads(x, n_heads):
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def attention_forward(x, p, prefix, n_heads, causal):
    """Multi-head self-attention over ``x`` of shape (B, T, d).

    Keys carry no bias: it would shift every score of a query by the same
    amount and so never reach the output.
    """
    d = x.shape[-1]
    q, k, v = np.split(linear_forward(x, p[prefix + "wqkv"]), 3, axis=-1)
    q = _split_heads(q + p[prefix + "bq"], n_heads)
    k = _split_heads(k, n_heads)
    v = _split_heads(v + p[prefix + "bv"], n_heads)
    scale = 1.0 / math.sqrt(d // n_heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    if causal:
        T = x.shape[1]
        allowed = np.tril(np.ones((T, T), dtype=bool))
        scores = np.where(allowed, scores, -np.inf)
    probs = softmax(scores)
    o = _merge_heads(probs @ v)
    out = linear_forward(o, p[prefix + "wo"], p[prefix + "bo"])
    return out, (x, q, k, v, probs, o, scale)


def attention_backward(dout, cache, p, prefix, n_heads, grads):
    x, q, k, v, probs, o, scale = cache
    do = linear_backward(dout, o, p[prefix + "wo"], grads, prefix + "wo", prefix + "bo")
    do = _split_heads(do, n_heads)
    dprobs = do @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ do
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    accumulate(grads, prefix + "bq", dq.reshape(-1, dq.shape[-1]).sum(axis=0))
    accumulate(grads, prefix + "bv", dv.reshape(-1, dv.shape[-1]).sum(axis=0))
    dqkv = np.concatenate([dq, dk, dv], axis=-1)
    return linear_backward(dqkv, x, p[prefix + "wqkv"], grads, prefix + "wqkv")


def block_forward(x, p, prefix, n_heads, causal):
    """Pre-norm residual block: attention then GELU MLP."""
    h1, ln1 = layernorm_forward(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    a, att = attention_forward(h1, p, prefix + "attn.", n_heads, causal)
    x1 = x + a
    h2, ln2 = layernorm_forward(x1, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    u = linear_forward(h2, p[prefix + "mlp.w1"], p[prefix + "mlp.b1"])
    g, gel = gelu_forward(u)
    m = linear_forward(g, p[prefix + "mlp.w2"], p[prefix + "mlp.b2"])
    return x1 + m, (ln1, att, ln2, h2, gel, g)


def block_backward(dy, cache, p, prefix, n_heads, grads):
    ln1, att, ln2, h2, gel, g = cache
    dg = linear_backward(dy, g, p[prefix + "mlp.w2"], grads, prefix + "mlp.w2", prefix + "mlp.b2")
    du = gelu_backward(dg, gel)
    dh2 = linear_backward(du, h2, p[prefix + "mlp.w1"], grads, prefix + "mlp.w1", prefix + "mlp.b1")
    dx1 = dy + layernorm_backward(dh2, ln2, grads, prefix + "ln2.g", prefix + "ln2.b")
    dh1 = attention_backward(dx1, att, p, prefix + "attn.", n_heads, grads)
    return dx1 + layernorm_backward(dh1, ln1, grads, prefix + "ln1.g", prefix + "ln1.b")


def stack_forward(x, p, prefix, n_layers, n_heads, causal):
    """Run ``n_layers`` blocks and the final layer norm ``{prefix}ln_f``."""
    caches = []
    for i in range(n_layers):
        x, c = block_forward(x, p, f"{prefix}blocks.{i}.", n_heads, causal)
        caches.append(c)
    out, lnf = layernorm_forward(x, p[prefix + "ln_f.g"], p[prefix + "ln_f.b"])
    return out, (caches, lnf)


def stack_backward(dy, cache, p, prefix, n_layers, n_heads, grads):
    caches, lnf = cache
    dx = layernorm_backward(dy, lnf, grads, prefix + "ln_f.g", prefix + "ln_f.b")
    for i in reversed(range(n_layers)):
        dx = block_backward(dx, caches[i], p, f"{prefix}blocks.{i}.", n_heads, grads)
    return dx


def block_param_shapes(prefix: str, d: int, mlp_mult: int = 4) -> dict[str, tuple[int, ...]]:
    return {
        prefix + "ln1.g": (d,),
        prefix + "ln1.b": (d,),
        prefix + "attn.wqkv": (d, 3 * d),
        prefix + "attn.bq": (d,),
        prefix + "attn.bv": (d,),
        prefix + "attn.wo": (d, d),
        prefix + "attn.bo": (d,),
        prefix + "ln2.g": (d,),
        prefix + "ln2.b": (d,),
        prefix + "mlp.w1": (d, mlp_mult * d),
        prefix + "mlp.b1": (mlp_mult * d,),
        prefix + "mlp.w2": (mlp_mult * d, d),
        prefix + "mlp.b2": (d,),
    }
