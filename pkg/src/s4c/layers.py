"""Pre-norm decoder block with a hand-written backward pass.

Arrays are ``(batch, time, hidden)``. ``mask`` is a ``(time, time)`` boolean
visibility matrix; ``mask=None`` means every row sees only itself, in which
case attention reduces exactly to the value projection.
"""

from __future__ import annotations

import math

import numpy as np

RMS_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

BLOCK_PARAMS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "w2")


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def rms_forward(x, gain):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    xhat = x * inv
    return xhat * gain, (xhat, inv)


def rms_backward(dy, gain, saved):
    xhat, inv = saved
    dgain = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    dxh = dy * gain
    dx = inv * (dxh - xhat * np.mean(dxh * xhat, axis=-1, keepdims=True))
    return dx, dgain


def _split(x, n_heads):
    b, t, h = x.shape
    return x.reshape(b, t, n_heads, h // n_heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, nh, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, nh * hd)


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def init_block(rng: np.random.Generator, hidden: int, n_layers_total: int, prefix: str,
               scale: float = 0.02) -> dict[str, np.ndarray]:
    proj = scale / math.sqrt(2.0 * max(n_layers_total, 1))
    return {
        prefix + "attn_norm": np.ones(hidden),
        prefix + "wq": rng.normal(0.0, scale, (hidden, hidden)),
        prefix + "wk": rng.normal(0.0, scale, (hidden, hidden)),
        prefix + "wv": rng.normal(0.0, scale, (hidden, hidden)),
        prefix + "wo": rng.normal(0.0, proj, (hidden, hidden)),
        prefix + "mlp_norm": np.ones(hidden),
        prefix + "w1": rng.normal(0.0, scale, (hidden, 4 * hidden)),
        prefix + "w2": rng.normal(0.0, proj, (4 * hidden, hidden)),
    }


def block_forward(p, prefix, x, n_heads, mask=None):
    g = lambda name: p[prefix + name]  # noqa: E731
    a, s1 = rms_forward(x, g("attn_norm"))
    v = a @ g("wv")
    if mask is None:
        q = k = att = None
        o = v
    else:
        q = a @ g("wq")
        k = a @ g("wk")
        qh, kh, vh = _split(q, n_heads), _split(k, n_heads), _split(v, n_heads)
        sc = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(qh.shape[-1])
        sc = np.where(mask, sc, -np.inf)
        sc = sc - sc.max(axis=-1, keepdims=True)
        e = np.exp(sc)
        att = e / e.sum(axis=-1, keepdims=True)
        o = _merge(att @ vh)
    x1 = x + o @ g("wo")
    b, s2 = rms_forward(x1, g("mlp_norm"))
    hpre = b @ g("w1")
    hact = gelu(hpre)
    y = x1 + hact @ g("w2")
    return y, (x, a, s1, q, k, v, att, o, b, s2, hpre, hact)


def block_backward(dy, p, prefix, saved, n_heads, dk_extra=None, dv_extra=None):
    """Backward of :func:`block_forward`. ``dk_extra``/``dv_extra`` are gradients
    reaching this block's keys/values from other readers (see :func:`memory_block_forward`)."""
    g = lambda name: p[prefix + name]  # noqa: E731
    x, a, s1, q, k, v, att, o, b, s2, hpre, hact = saved
    grads = {}
    grads[prefix + "w2"] = _flat(hact).T @ _flat(dy)
    dhpre = (dy @ g("w2").T) * gelu_grad(hpre)
    grads[prefix + "w1"] = _flat(b).T @ _flat(dhpre)
    db = dhpre @ g("w1").T
    dx1_norm, grads[prefix + "mlp_norm"] = rms_backward(db, g("mlp_norm"), s2)
    dx1 = dy + dx1_norm

    grads[prefix + "wo"] = _flat(o).T @ _flat(dx1)
    do = dx1 @ g("wo").T
    hidden = x.shape[-1]
    if att is None:
        dv = do
        grads[prefix + "wq"] = np.zeros((hidden, hidden))
        grads[prefix + "wk"] = np.zeros((hidden, hidden))
        da = dv @ g("wv").T
    else:
        qh, kh, vh = _split(q, n_heads), _split(k, n_heads), _split(v, n_heads)
        doh = _split(do, n_heads)
        datt = doh @ vh.transpose(0, 1, 3, 2)
        dvh = att.transpose(0, 1, 3, 2) @ doh
        dsc = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
        dsc /= math.sqrt(qh.shape[-1])
        dq = _merge(dsc @ kh)
        dk = _merge(dsc.transpose(0, 1, 3, 2) @ qh)
        dv = _merge(dvh)
        if dk_extra is not None:
            dk = dk + dk_extra
        if dv_extra is not None:
            dv = dv + dv_extra
        grads[prefix + "wq"] = _flat(a).T @ _flat(dq)
        grads[prefix + "wk"] = _flat(a).T @ _flat(dk)
        da = dq @ g("wq").T + dk @ g("wk").T + dv @ g("wv").T
    grads[prefix + "wv"] = _flat(a).T @ _flat(dv)
    dxa, grads[prefix + "attn_norm"] = rms_backward(da, g("attn_norm"), s1)
    return dx1 + dxa, grads


def block_infer(p, prefix, x, keys, values, start, visible, n_heads):
    """Cached inference step: write this block's K/V for the new rows at
    ``start`` and attend over ``keys[:start + n]`` under ``visible``."""
    n, h = x.shape
    hd = h // n_heads
    end = start + n
    a = rms_forward(x, p[prefix + "attn_norm"])[0]
    q = a @ p[prefix + "wq"]
    keys[start:end] = a @ p[prefix + "wk"]
    values[start:end] = a @ p[prefix + "wv"]
    qh = q.reshape(n, n_heads, hd).transpose(1, 0, 2)
    kh = keys[:end].reshape(end, n_heads, hd).transpose(1, 2, 0)
    vh = values[:end].reshape(end, n_heads, hd).transpose(1, 0, 2)
    sc = (qh @ kh) * (1.0 / math.sqrt(hd))
    sc = np.where(visible, sc, -np.inf)
    sc -= sc.max(axis=-1, keepdims=True)
    e = np.exp(sc)
    att = e / e.sum(axis=-1, keepdims=True)
    o = (att @ vh).transpose(1, 0, 2).reshape(n, h)
    x = x + o @ p[prefix + "wo"]
    b = rms_forward(x, p[prefix + "mlp_norm"])[0]
    return x + gelu(b @ p[prefix + "w1"]) @ p[prefix + "w2"]


def kv_project(p, prefix, x):
    """Keys and values a block would compute for ``x`` (its attention memory)."""
    a, s = rms_forward(x, p[prefix + "attn_norm"])
    return a @ p[prefix + "wk"], a @ p[prefix + "wv"], (a, s)


def kv_project_backward(dk, dv, p, prefix, saved):
    a, s = saved
    grads = {prefix + "wk": _flat(a).T @ _flat(dk), prefix + "wv": _flat(a).T @ _flat(dv)}
    da = dk @ p[prefix + "wk"].T + dv @ p[prefix + "wv"].T
    dx, grads[prefix + "attn_norm"] = rms_backward(da, p[prefix + "attn_norm"], s)
    return dx, grads


def memory_block_forward(p, prefix, x, mem_k, mem_v, mem_mask, n_heads):
    """Block whose rows attend to ``mem`` (where ``mem_mask`` allows) and to themselves only.

    ``x`` is ``(B, N, H)``; ``mem_k``/``mem_v`` are ``(B, T, H)``; ``mem_mask`` is ``(N, T)``.
    """
    g = lambda name: p[prefix + name]  # noqa: E731
    a, s1 = rms_forward(x, g("attn_norm"))
    q, k, v = a @ g("wq"), a @ g("wk"), a @ g("wv")
    qh, kh, vh = _split(q, n_heads), _split(k, n_heads), _split(v, n_heads)
    mkh, mvh = _split(mem_k, n_heads), _split(mem_v, n_heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    sc_mem = np.where(mem_mask, (qh @ mkh.transpose(0, 1, 3, 2)) * scale, -np.inf)
    sc_self = np.sum(qh * kh, axis=-1, keepdims=True) * scale
    top = np.maximum(sc_mem.max(axis=-1, keepdims=True, initial=-np.inf), sc_self)
    e_mem = np.exp(sc_mem - top)
    e_self = np.exp(sc_self - top)
    z = e_mem.sum(axis=-1, keepdims=True) + e_self
    att_mem, att_self = e_mem / z, e_self / z
    o = _merge(att_mem @ mvh + att_self * vh)
    x1 = x + o @ g("wo")
    b, s2 = rms_forward(x1, g("mlp_norm"))
    hpre = b @ g("w1")
    hact = gelu(hpre)
    y = x1 + hact @ g("w2")
    return y, (a, s1, qh, kh, vh, mkh, mvh, att_mem, att_self, o, b, s2, hpre, hact)


def memory_block_backward(dy, p, prefix, saved, n_heads):
    """Returns (dx, grads, dmem_k, dmem_v)."""
    g = lambda name: p[prefix + name]  # noqa: E731
    a, s1, qh, kh, vh, mkh, mvh, att_mem, att_self, o, b, s2, hpre, hact = saved
    grads = {prefix + "w2": _flat(hact).T @ _flat(dy)}
    dhpre = (dy @ g("w2").T) * gelu_grad(hpre)
    grads[prefix + "w1"] = _flat(b).T @ _flat(dhpre)
    dx1_norm, grads[prefix + "mlp_norm"] = rms_backward(dhpre @ g("w1").T, g("mlp_norm"), s2)
    dx1 = dy + dx1_norm
    grads[prefix + "wo"] = _flat(o).T @ _flat(dx1)
    doh = _split(dx1 @ g("wo").T, n_heads)
    datt_mem = doh @ mvh.transpose(0, 1, 3, 2)
    datt_self = np.sum(doh * vh, axis=-1, keepdims=True)
    dmvh = att_mem.transpose(0, 1, 3, 2) @ doh
    dvh = att_self * doh
    tot = np.sum(datt_mem * att_mem, axis=-1, keepdims=True) + datt_self * att_self
    scale = 1.0 / math.sqrt(qh.shape[-1])
    dsc_mem = att_mem * (datt_mem - tot) * scale
    dsc_self = att_self * (datt_self - tot) * scale
    dqh = dsc_mem @ mkh + dsc_self * kh
    dkh = dsc_self * qh
    dmkh = dsc_mem.transpose(0, 1, 3, 2) @ qh
    dq, dk, dv = _merge(dqh), _merge(dkh), _merge(dvh)
    grads[prefix + "wq"] = _flat(a).T @ _flat(dq)
    grads[prefix + "wk"] = _flat(a).T @ _flat(dk)
    grads[prefix + "wv"] = _flat(a).T @ _flat(dv)
    da = dq @ g("wq").T + dk @ g("wk").T + dv @ g("wv").T
    dxa, grads[prefix + "attn_norm"] = rms_backward(da, g("attn_norm"), s1)
    return dx1 + dxa, grads, _merge(dmkh), _merge(dmvh)


def block_query(p, prefix, x, keys, values, length, n_heads):
    """Inference counterpart of :func:`memory_block_forward` for ``(N, H)`` rows:
    every row sees ``keys[:length]`` and itself; nothing is written."""
    out, _ = memory_block_forward(p, prefix, x[None], keys[None, :length], values[None, :length],
                                  np.ones((x.shape[0], length), dtype=np.bool_), n_heads)
    return out[0]
