"""Independent reference implementations used to cross-check the package.

Everything here is deliberately naive (loops, brute force) and shares no code
with the production paths it verifies.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_triple_loop(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def singular_values_via_gram_eigen(a, sweeps: int = 100, tol: float = 1e-14):
    """Singular values as square roots of the eigenvalues of A^T A.

    The symmetric eigenproblem is solved by brute-force cyclic two-sided
    Jacobi rotations, a different algorithm from the production SVD.
    """
    a = np.asarray(a, dtype=float)
    s = a.T @ a
    n = s.shape[0]
    scale = max(abs(s).max(), 1e-300)
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(s[p, q]) <= tol * scale:
                    continue
                off = max(off, abs(s[p, q]))
                tau = (s[q, q] - s[p, p]) / (2.0 * s[p, q])
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                sn = c * t
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = sn
                rot[q, p] = -sn
                s = rot.T @ s @ rot
        if off == 0.0:
            break
    eigs = np.sort(np.diag(s))[::-1]
    return np.sqrt(np.maximum(eigs, 0.0))


def finite_diff_grad(f, x, step: float = 1e-6):
    """Central finite differences of a scalar function over an array."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def brute_force_selection(h, centroid_banks, thresholds, r_h):
    """Literal evaluation of the routing rule in pure Python.

    Per level: the minimum Euclidean distance to the level's centroids; the
    chosen level is the smallest index whose distance is at most its
    threshold, falling back to the overall nearest level (ties to the lowest
    index); the final level is the minimum of the choice and the historical
    level.
    """
    distances = []
    for centroids in centroid_banks:
        best = math.inf
        for row in centroids:
            acc = 0.0
            for hv, cv in zip(h, row):
                diff = hv - cv
                acc += diff * diff
            best = min(best, math.sqrt(acc))
        distances.append(best)

    chosen = None
    for level in range(1, len(centroid_banks) + 1):
        if distances[level - 1] <= thresholds[level - 1]:
            chosen = level
            break
    fallback = chosen is None
    if fallback:
        best_d = min(distances)
        chosen = 1 + distances.index(best_d)
    return distances, chosen, min(chosen, r_h), fallback


def sort_and_slice_levels(scores_by_user: dict[str, float], k: int) -> dict[str, int]:
    """Stratification oracle: sort users by score, slice into k chunks at
    ceil(n*j/k), then pull users tied with a boundary score into the best
    chunk containing that score."""
    ordered = sorted(scores_by_user.items(), key=lambda kv: (-kv[1], kv[0]))
    n = len(ordered)
    slices = {}
    for j in range(k):
        lo = math.ceil(n * j / k)
        hi = math.ceil(n * (j + 1) / k)
        for uid, _ in ordered[lo:hi]:
            slices[uid] = j + 1
    best_level_of_score = {}
    for uid, score in ordered:
        lvl = slices[uid]
        if score not in best_level_of_score or lvl < best_level_of_score[score]:
            best_level_of_score[score] = lvl
    return {uid: best_level_of_score[score] for uid, score in ordered}
