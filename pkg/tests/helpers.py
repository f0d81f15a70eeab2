"""Shared fixture builders and brute-force reference implementations."""

from __future__ import annotations

import math
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image


def textured_image(rng, height, width, smooth=False):
    """Random RGB content; ``smooth`` gives gradients instead of noise."""
    if smooth:
        yy, xx = np.mgrid[0:height, 0:width]
        base = rng.integers(0, 256, 3)
        img = (base + 3 * xx[..., None] + 2 * yy[..., None]) % 256
        return img.astype(np.uint8)
    return rng.integers(0, 256, (height, width, 3), dtype=np.uint8)


def make_tree(root, n_au, n_tp, size=24, seed=0, fmt="png"):
    """A CASIA-style ``Au``/``Tp`` tree of small synthetic images.

    Authentic images are smooth gradients, tampered ones carry a pasted noise
    patch, so the classes differ under ELA.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    for sub, n in (("Au", n_au), ("Tp", n_tp)):
        (root / sub).mkdir(parents=True, exist_ok=True)
        for i in range(n):
            img = textured_image(rng, size, size, smooth=True)
            if sub == "Tp":
                k = size // 2
                img[:k, :k] = rng.integers(0, 256, (k, k, 3), dtype=np.uint8)
            Image.fromarray(img).save(root / sub / f"{sub.lower()}_{i:03d}.{fmt}")
    return root


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def ela_difference_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h, w, c = a.shape
    d = [[[abs(int(a[i, j, k]) - int(b[i, j, k])) for k in range(c)]
          for j in range(w)] for i in range(h)]
    peak = max(v for row in d for px in row for v in px)
    s = 255.0 / peak if peak else 1.0
    out = np.zeros_like(a)
    for i in range(h):
        for j in range(w):
            for k in range(c):
                out[i, j, k] = min(255, max(0, round_half_away(d[i][j][k] * s)))
    return out


def resize_bilinear_loop(a: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w, c = a.shape
    out = np.zeros((height, width, c), dtype=np.uint8)

    def coord(o, n_in, n_out):
        s = (o + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1)
        lo = math.floor(s)
        return lo, min(lo + 1, n_in - 1), s - lo

    for i in range(height):
        y0, y1, fy = coord(i, h, height)
        for j in range(width):
            x0, x1, fx = coord(j, w, width)
            for k in range(c):
                top = float(a[y0, x0, k]) * (1 - fx) + float(a[y0, x1, k]) * fx
                bot = float(a[y1, x0, k]) * (1 - fx) + float(a[y1, x1, k]) * fx
                v = top * (1 - fy) + bot * fy
                out[i, j, k] = min(255, max(0, round_half_away(v)))
    return out


def conv_loop(x, w, b):
    """Valid cross-correlation of ``(h, w, cin)`` with HWIO weights."""
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    out = np.zeros((h - kh + 1, wd - kw + 1, cout), dtype=np.float64)
    for i in range(h - kh + 1):
        for j in range(wd - kw + 1):
            for o in range(cout):
                acc = 0.0
                for di in range(kh):
                    for dj in range(kw):
                        for ci in range(cin):
                            acc += float(x[i + di, j + dj, ci]) * float(w[di, dj, ci, o])
                out[i, j, o] = acc + float(b[o])
    return out


def maxpool_loop(x):
    h, w, c = x.shape
    out = np.zeros((h // 2, w // 2, c), dtype=x.dtype)
    route = np.zeros((h // 2, w // 2, c, 2), dtype=np.int64)
    for i in range(h // 2):
        for j in range(w // 2):
            for k in range(c):
                best, where = None, None
                for di in range(2):
                    for dj in range(2):
                        v = x[2 * i + di, 2 * j + dj, k]
                        if best is None or v > best:
                            best, where = v, (2 * i + di, 2 * j + dj)
                out[i, j, k] = best
                route[i, j, k] = where
    return out, route


def adam_scalar_reference(p, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float Adam, written from the update equations."""
    m = v = 0.0
    trajectory = []
    for t in range(1, steps + 1):
        g = grad_fn(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p = p - (lr * m_hat) / (math.sqrt(v_hat) + eps)
        trajectory.append(p)
    return trajectory


def fma32_exact(a, b, c) -> np.float32:
    """Correctly rounded float32 ``a * b + c`` from exact rational arithmetic."""
    exact = Fraction(float(a)) * Fraction(float(b)) + Fraction(float(c))
    r = np.float32(float(exact))
    candidates = (r, np.nextafter(r, np.float32(np.inf)), np.nextafter(r, np.float32(-np.inf)))
    # nearest, ties to the even significand
    return min(candidates, key=lambda v: (abs(Fraction(float(v)) - exact),
                                          int(np.float32(v).view(np.int32)) & 1))


# -- gradient checking ----------------------------------------------------------

def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def check_layer(layer, x, training=False):
    """Compare analytic input and parameter gradients with finite differences."""
    out = layer.forward(x, training)
    probe = np.random.default_rng(x.size).standard_normal(out.shape)

    def loss():
        return float(np.sum(layer.forward(x, training) * probe))

    layer.forward(x, training)
    grad_in = layer.backward(probe)
    analytic = [np.asarray(g, dtype=np.float64).copy() for g in layer.grads()]
    errs = []
    if grad_in is not None:
        errs.append(rel_err(grad_in, numeric_grad(loss, x)))
    for p, g in zip(layer.params(), analytic):
        errs.append(rel_err(g, numeric_grad(loss, p)))
    return max(errs)


# -- acceptance reporting ---------------------------------------------------------

ACCEPTANCE_RESULTS: list[str] = []
