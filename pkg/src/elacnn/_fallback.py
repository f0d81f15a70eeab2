"""Pure numpy kernels.

Each function reproduces the accumulation order of the compiled kernel with
the same name, so both backends agree bitwise on float32 inputs. The compiled
kernels fold every product into its accumulator with a fused multiply-add;
:func:`fma32` reproduces that rounding exactly. The functions are also
dtype-generic: float64 inputs (used by the gradient checks) accumulate with a
plain multiply and add.
"""

import numpy as np

_CHUNK = 4096


def fma32(a, b, c):
    """``a * b + c`` for float32 operands, rounded once to float32.

    The product of two float32 values is exact in float64. The sum is done in
    float64 with its rounding error recovered by TwoSum, and the float64
    result is then rounded to odd, which makes the final rounding to float32
    correct (the float64 significand has more than two spare bits).
    """
    p = np.multiply(a, b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    s = p + c
    bv = s - p
    err = (p - (s - bv)) + (c - bv)
    bits = s.view(np.int64)
    inexact_even = (err != 0) & ((bits & 1) == 0) & np.isfinite(s)
    # step one float64 ulp towards the exact sum; the last bit becomes odd
    toward = np.where((err > 0) == (s > 0), 1, -1)
    bits = np.where(inexact_even, bits + toward, bits)
    return bits.view(np.float64).astype(np.float32)


def madd(a, b, acc):
    """One accumulation step, fused for float32 and plain otherwise."""
    if np.result_type(a, b, acc) == np.float32:
        return fma32(a, b, acc)
    return acc + a * b


def conv2d_forward(x, w, b):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    acc = np.zeros((n, ho, wo, cout), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            for ci in range(cin):
                acc = madd(x[:, di:di + ho, dj:dj + wo, ci, None], w[di, dj, ci], acc)
    return acc + b


def conv2d_grad_weights(x, g, kh, kw):
    n, h, wd, cin = x.shape
    _, ho, wo, cout = g.shape
    gw = np.zeros((kh, kw, cin, cout), dtype=x.dtype)
    gb = np.zeros(cout, dtype=x.dtype)
    for s in range(n):
        gws = np.zeros_like(gw)
        gbs = np.zeros_like(gb)
        for i in range(ho):
            for j in range(wo):
                gv = g[s, i, j]
                gws = madd(x[s, i:i + kh, j:j + kw, :, None], gv, gws)
                gbs += gv
        gw += gws
        gb += gbs
    return gw, gb


def maxpool2_forward(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    arg = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(g, arg):
    n, ho, wo, c = g.shape
    slots = np.zeros((n, ho, wo, c, 4), dtype=g.dtype)
    np.put_along_axis(slots, arg[..., None].astype(np.intp), g[..., None], axis=-1)
    slots = slots.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(slots.reshape(n, 2 * ho, 2 * wo, c))


def _dense_forward_unfused(x, w):
    n, k = x.shape
    acc = np.zeros((n, w.shape[1]), dtype=x.dtype)
    for s in range(n):
        row = acc[s:s + 1]
        for k0 in range(0, k, _CHUNK):
            terms = x[s, k0:k0 + _CHUNK, None] * w[k0:k0 + _CHUNK]
            row = np.add.accumulate(np.concatenate([row, terms]), axis=0)[-1:]
        acc[s] = row[0]
    return acc


def dense_forward(x, w, b):
    if np.result_type(x, w) == np.float32:
        acc = np.zeros((x.shape[0], w.shape[1]), dtype=np.float32)
        for kk in range(x.shape[1]):
            acc = fma32(x[:, kk, None], w[kk], acc)
    else:
        acc = _dense_forward_unfused(x, w)
    if b is not None:
        acc = acc + b
    return acc


def dense_grad_input(w, g):
    k, m = w.shape
    n = g.shape[0]
    if np.result_type(w, g) == np.float32:
        acc = np.zeros((n, k), dtype=np.float32)
        for j in range(m):
            acc = fma32(w[:, j], g[:, j, None], acc)
        return acc
    out = np.empty((n, k), dtype=w.dtype)
    for s in range(n):
        for k0 in range(0, k, _CHUNK):
            blk = w[k0:k0 + _CHUNK]
            terms = np.concatenate([np.zeros((blk.shape[0], 1), dtype=w.dtype), blk * g[s]], axis=1)
            out[s, k0:k0 + _CHUNK] = np.add.accumulate(terms, axis=1)[:, -1]
    return out


def _adam_update(p, m, v, g, b1, c1, b2, c2, bc1, bc2, lr, eps):
    m[...] = b1 * m + c1 * g
    v[...] = b2 * v + c2 * (g * g)
    mh = m / bc1
    vh = v / bc2
    p[...] = p - (lr * mh) / (np.sqrt(vh) + eps)


def adam_dense(p, m, v, gsum, divisor, b1, c1, b2, c2, bc1, bc2, lr, eps):
    _adam_update(p, m, v, gsum / divisor, b1, c1, b2, c2, bc1, bc2, lr, eps)


def adam_outer(p, m, v, xs, gs, divisor, b1, c1, b2, c2, bc1, bc2, lr, eps):
    k = p.shape[0]
    for k0 in range(0, k, _CHUNK):
        sl = slice(k0, k0 + _CHUNK)
        acc = np.zeros_like(p[sl])
        for s in range(xs.shape[0]):
            acc = madd(xs[s, sl, None], gs[s], acc)
        _adam_update(p[sl], m[sl], v[sl], acc / divisor, b1, c1, b2, c2, bc1, bc2, lr, eps)
