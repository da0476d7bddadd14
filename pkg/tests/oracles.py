"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the package's numerics; each oracle is a direct loop
over the defining sum or comparison.
"""
import math

import numpy as np


def conv2d_loop(x, k, stride=1, pad=0, groups=1):
    """Direct nested-loop grouped cross-correlation, (H, W, Cin) input."""
    H, W, cin = x.shape
    kh, kw, cg, cout = k.shape
    og = cout // groups
    xp = np.zeros((H + 2 * pad, W + 2 * pad, cin))
    xp[pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((Ho, Wo, cout))
    for o in range(cout):
        g = o // og
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        for c in range(cg):
                            acc += xp[i * stride + a, j * stride + b, g * cg + c] * k[a, b, c, o]
                out[i, j, o] = acc
    return out


def cosine_loop(t, protos):
    X, Y, _ = t.shape
    out = np.zeros((X, Y, len(protos)))
    for x in range(X):
        for y in range(Y):
            v = t[x, y]
            for n, p in enumerate(protos):
                nv = math.sqrt(sum(a * a for a in v))
                npn = math.sqrt(sum(a * a for a in p))
                if nv == 0 or npn == 0:
                    out[x, y, n] = 0.0
                else:
                    out[x, y, n] = sum(a * b for a, b in zip(v, p)) / (nv * npn)
    return out


def masked_mean_loop(f, m):
    X, Y, D = f.shape
    acc = [0.0] * D
    count = 0.0
    for x in range(X):
        for y in range(Y):
            if m[x, y]:
                count += m[x, y]
                for d in range(D):
                    acc[d] += m[x, y] * f[x, y, d]
    return np.array([a / count for a in acc])


def gaussian_kernel_2d(sigma):
    """Truncated 2-D Gaussian at radius ceil(3 sigma), normalized in 2-D."""
    r = math.ceil(3 * sigma)
    w = np.zeros((2 * r + 1, 2 * r + 1))
    for i in range(-r, r + 1):
        for j in range(-r, r + 1):
            w[i + r, j + r] = math.exp(-(i * i + j * j) / (2 * sigma * sigma)) / (2 * math.pi * sigma ** 2)
    return w / w.sum()


def reflect(i, n):
    """numpy 'reflect' convention by repeated mirroring (no edge repeat)."""
    if n == 1:
        return 0
    while i < 0 or i >= n:
        if i < 0:
            i = -i
        if i >= n:
            i = 2 * (n - 1) - i
    return i


def smooth_loop(m, sigma):
    """Direct 2-D convolution of an (X, Y) map with reflect padding."""
    w = gaussian_kernel_2d(sigma)
    r = w.shape[0] // 2
    X, Y = m.shape
    out = np.zeros_like(m, dtype=float)
    for x in range(X):
        for y in range(Y):
            acc = 0.0
            for a in range(-r, r + 1):
                for b in range(-r, r + 1):
                    acc += w[a + r, b + r] * m[reflect(x + a, X), reflect(y + b, Y)]
            out[x, y] = acc
    return out


def channel_max_loop(t):
    X, Y, D = t.shape
    out = np.zeros((X, Y, 1))
    for x in range(X):
        for y in range(Y):
            best = t[x, y, 0]
            for d in range(1, D):
                if t[x, y, d] > best:
                    best = t[x, y, d]
            out[x, y, 0] = best
    return out


def miou_loop(pred, gt, num_classes):
    """Per-pixel confusion counting; returns (iou per class or None, mean)."""
    inter = [0] * (num_classes + 1)
    pcount = [0] * (num_classes + 1)
    gcount = [0] * (num_classes + 1)
    for p, g in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
        pcount[p] += 1
        gcount[g] += 1
        if p == g:
            inter[p] += 1
    ious = []
    for c in range(num_classes + 1):
        union = pcount[c] + gcount[c] - inter[c]
        ious.append(None if union == 0 else inter[c] / union)
    present = [v for v in ious if v is not None]
    return ious, sum(present) / len(present)


def bce_scalar(v, u):
    """Sigmoid cross-entropy of one logit at high precision."""
    import mpmath as mp
    mp.mp.dps = 40
    s = 1 / (1 + mp.e ** (-mp.mpf(v)))
    return float(-(u * mp.log(s) + (1 - u) * mp.log(1 - s)))


def finite_diff(f, arr, h=1e-4, idx=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def max_rel_err(analytic, numeric: dict, floor=1e-6):
    a = np.asarray(analytic).reshape(-1)
    worst = 0.0
    for i, n in numeric.items():
        worst = max(worst, abs(a[i] - n) / max(abs(a[i]), abs(n), floor))
    return worst
