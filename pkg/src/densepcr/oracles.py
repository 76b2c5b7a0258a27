"""Slow, independent reference implementations used by tests and ``selftest``.

Nothing here calls into the fast paths it is meant to check.
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np


def chamfer_bruteforce(a, b) -> float:
    a, b = np.asarray(a, dtype=float).tolist(), np.asarray(b, dtype=float).tolist()

    def directed(src, dst):
        total = []
        for x in src:
            best = math.inf
            for y in dst:
                dx, dy, dz = x[0] - y[0], x[1] - y[1], x[2] - y[2]
                d = dx * dx + dy * dy + dz * dz
                if d < best:
                    best = d
            total.append(best)
        return math.fsum(total)

    return directed(a, b) + directed(b, a)


def emd_enumerate(a, b) -> float:
    """Minimum over all n! bijections; only sensible for n <= 8."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n = len(a)
    dist = [[math.dist(a[i], b[j]) for j in range(n)] for i in range(n)]
    return min(math.fsum(dist[i][p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def fps_bruteforce(points, k: int, start: int = 0) -> list[int]:
    pts = np.asarray(points, dtype=float).tolist()
    chosen = [start]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i, p in enumerate(pts):
            if i in chosen:
                continue
            d = min(sum((p[c] - pts[j][c]) ** 2 for c in range(3)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def matmul_loops(x, w, b) -> np.ndarray:
    m, k = len(x), len(w)
    n = len(b)
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = b[j]
            for t in range(k):
                s += x[i][t] * w[t][j]
            out[i, j] = s
    return out


def conv2d_loops(x, kernels, bias, stride: int, pad: int) -> np.ndarray:
    c_in, h, w = x.shape
    c_out, _, k, _ = kernels.shape
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                s = 0.0 if bias is None else bias[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            yy, xx = i * stride + di - pad, j * stride + dj - pad
                            if 0 <= yy < h and 0 <= xx < w:
                                s += x[c, yy, xx] * kernels[o, c, di, dj]
                out[o, i, j] = s
    return out


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-5) -> float:
    """Central difference of ``f`` in one entry of ``arr`` (modified in place, then restored)."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


def gradient_check(f: Callable[[], float], arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                   h: float = 1e-5, max_entries: int | None = None, rng=None,
                   skip_kinks: bool = False, kink_tol: float = 1e-4,
                   asym_tol: float = 1e-2) -> tuple[float, int, int]:
    """Compare analytic ``grads`` with central differences of ``f`` over ``arrays``.

    With ``skip_kinks`` an entry is dropped when it looks non-smooth: either the
    central quotients at ``h`` and ``h/2`` disagree (a switch inside the
    stencil) or the forward and backward one-sided quotients disagree (the
    point sits exactly on a ReLU/argmax boundary, where the central quotient
    is stable but meaningless).
    Returns ``(relative error, entries checked, entries skipped)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    f0 = f() if skip_kinks else None
    ana, num = [], []
    skipped = 0
    for arr, g in zip(arrays, grads):
        idx = list(np.ndindex(arr.shape))
        if max_entries is not None and len(idx) > max_entries:
            idx = [idx[i] for i in sorted(rng.choice(len(idx), size=max_entries, replace=False))]
        for ix in idx:
            if not skip_kinks:
                ana.append(g[ix])
                num.append(numeric_grad(f, arr, ix, h))
                continue
            old = arr[ix]
            vals = []
            for step in (h, -h, h / 2, -h / 2):
                arr[ix] = old + step
                vals.append(f())
            arr[ix] = old
            fp, fm, fp2, fm2 = vals
            d1, d2 = (fp - fm) / (2 * h), (fp2 - fm2) / h
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            scale = max(1.0, abs(d1), abs(d2))
            if abs(d1 - d2) > kink_tol * scale or abs(fwd - bwd) > asym_tol * scale:
                skipped += 1
                continue
            ana.append(g[ix])
            num.append(d1)
    return relative_error(np.array(ana), np.array(num)), len(ana), skipped
