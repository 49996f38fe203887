"""Independent reference implementations used by the test-suite."""
from __future__ import annotations

import itertools
import math

import numpy as np


def central_difference(f, arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``arr`` (mutated in place and restored)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic, numeric) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-3 * max|n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = max(1e-3 * np.abs(n).max(), 1e-10)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def naive_conv3d(x, w, b=None):
    """Six nested loops over output voxels and kernel taps, zero 'same' padding."""
    N, C, D, H, W = x.shape
    K, _, kd, kh, kw = w.shape
    rd, rh, rw = kd // 2, kh // 2, kw // 2
    out = np.zeros((N, K, D, H, W))
    for n, k in itertools.product(range(N), range(K)):
        for d, hh, ww in itertools.product(range(D), range(H), range(W)):
            acc = 0.0 if b is None else float(b[k])
            for c in range(C):
                for i in range(kd):
                    for j in range(kh):
                        for l in range(kw):
                            zi, zj, zl = d + i - rd, hh + j - rh, ww + l - rw
                            if 0 <= zi < D and 0 <= zj < H and 0 <= zl < W:
                                acc += w[k, c, i, j, l] * x[n, c, zi, zj, zl]
            out[n, k, d, hh, ww] = acc
    return out


def dense_gaussian_oracle(vol, fwhm, spacing):
    """Brute-force dense 3D convolution with a cube-truncated, unit-sum Gaussian."""
    sig = [fwhm / (2 * math.sqrt(2 * math.log(2))) / s for s in spacing]
    rad = [max(int(math.ceil(4 * s)), 1) for s in sig]
    ax = [np.arange(-r, r + 1) for r in rad]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    kern = np.exp(-0.5 * ((gx / sig[0]) ** 2 + (gy / sig[1]) ** 2 + (gz / sig[2]) ** 2))
    kern /= kern.sum()
    nx, ny, nz = vol.shape
    out = np.zeros_like(vol, dtype=float)
    for i, j, k in itertools.product(range(nx), range(ny), range(nz)):
        acc = 0.0
        for a, b, c in itertools.product(*[range(2 * r + 1) for r in rad]):
            p, q, s = i + a - rad[0], j + b - rad[1], k + c - rad[2]
            if 0 <= p < nx and 0 <= q < ny and 0 <= s < nz:
                acc += kern[a, b, c] * vol[p, q, s]
        out[i, j, k] = acc
    return out


def enumerate_operating_points(scores, labels):
    """(FPR, TPR, precision, recall) for the rule ``score >= t`` at every distinct t, high to low."""
    pts = []
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = np.sum(pred & labels)
        fp = np.sum(pred & ~labels)
        pts.append((fp / np.sum(~labels), tp / np.sum(labels), tp / pred.sum(), tp / np.sum(labels)))
    return pts


def auc_oracle(scores, labels):
    pts = [(0.0, 0.0)] + [(f, t) for f, t, _, _ in enumerate_operating_points(scores, labels)]
    return sum((f1 - f0) * (t0 + t1) / 2 for (f0, t0), (f1, t1) in zip(pts, pts[1:]))


def ap_oracle(scores, labels):
    area, prev_r = 0.0, 0.0
    for _, _, p, r in enumerate_operating_points(scores, labels):
        area += (r - prev_r) * p
        prev_r = r
    return area
