"""Shared test utilities: naive oracles and gradient-check wrappers."""

import numpy as np

from gamair import ops
from gamair.gradcheck import finite_diff_check
from gamair.tensor import Tensor

GRAD_TOL = 1e-4


def rand(rng, shape, requires_grad=False, dtype=np.float64):
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=requires_grad)


def projected(f, x, rng):
    """Wrap a tensor-valued ``f`` into a scalar: sum(f(x) * R) for a fixed random R."""
    r = Tensor(rng.standard_normal(f(x).shape))
    return lambda t: ops.sum_all(ops.mul(f(t), r))


def grad_error(f, x, rng, wrt=(), h=1e-5, order=2):
    return finite_diff_check(projected(f, x, rng), x, h=h, wrt=wrt, order=order)


def naive_conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct loop over every output element; the reference for conv2d."""
    n, c, h, wd = x.shape
    co, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    per_group = co // groups
    for bi in range(n):
        for o in range(co):
            g = o // per_group
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[bi, g * cg + ci, i * stride + di, j * stride + dj] * w[o, ci, di, dj]
                    out[bi, o, i, j] = acc
    if b is not None:
        out += b.reshape(1, co, 1, 1)
    return out


def naive_gama(x, k_chan, k_height, k_width, fusion="additive"):
    """Step-by-step GAMA forward with explicit loops for the means and the
    single-channel convolutions (zero padding 3)."""
    n, c, h, w = x.shape

    def conv7(img, k):
        return naive_conv2d(img[None, None], k[None, None], padding=3)[0, 0]

    out = np.empty_like(x)
    for b in range(n):
        chan_mean = np.array([[sum(x[b, ci, i, j] for ci in range(c)) / c for j in range(w)] for i in range(h)])
        height_mean = np.array([[sum(x[b, ci, i, j] for i in range(h)) / h for j in range(w)] for ci in range(c)])
        width_mean = np.array([[sum(x[b, ci, i, j] for j in range(w)) / w for ci in range(c)] for i in range(h)])
        a = conv7(chan_mean, k_chan)  # (H, W)
        bb = conv7(height_mean, k_height)  # (C, W)
        cc = conv7(width_mean, k_width)  # (H, C)
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    terms = (a[i, j], bb[ci, j], cc[i, ci])
                    if fusion == "additive":
                        out[b, ci, i, j] = x[b, ci, i, j] + sum(terms)
                    else:
                        sig = [1 / (1 + np.exp(-t)) for t in terms]
                        out[b, ci, i, j] = x[b, ci, i, j] * sig[0] * sig[1] * sig[2]
    return out
