"""Dense linear algebra kernels used across the package.

Three nontrivial pieces live here: matrix products with contract checking,
a one-sided Jacobi singular value decomposition (the basis for the nuclear
norm and its gradient), and Lloyd's K-means with k-means++ seeding. All
operations are pure functions over immutable inputs and are deterministic
for fixed arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SVD_SWEEP_LIMIT = 60
SVD_OFFDIAG_TOL = 1e-12
RANK_TOL = 1e-10
KMEANS_ITER_LIMIT = 300


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ValueError):
    """A matrix contains NaN or Inf entries."""


class DegenerateSubgradientError(ArithmeticError):
    """Nuclear-norm gradient requested at a near-rank-deficient point.

    The gradient is only well defined for matrices whose smallest singular
    value is bounded away from zero; callers decide how to perturb.
    """


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array, validating the invariants."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}: "
            "inner dimensions differ"
        )
    out = a @ b
    if out.size and not np.isfinite(out).all():
        raise NonFiniteError("matrix product overflowed to non-finite values")
    return out


@dataclass
class SvdResult:
    """Thin SVD ``a = u @ diag(singular_values) @ v.T`` with r = min(rows, cols)."""

    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray


def svd(a) -> SvdResult:
    """One-sided Jacobi SVD.

    Columns of the working matrix are orthogonalized by plane rotations whose
    angles come from the column Gram matrix; the Gram matrix is refreshed from
    the rotated columns once per sweep to keep the bookkeeping exact. Sweeps
    stop when every normalized off-diagonal Gram entry is at most
    ``SVD_OFFDIAG_TOL`` or after ``SVD_SWEEP_LIMIT`` sweeps.
    """
    a = as_matrix(a)
    m, n = a.shape
    transposed = False
    if m < n:
        a = a.T
        m, n = n, m
        transposed = True

    work = a.copy()
    v = np.eye(n)
    for _ in range(SVD_SWEEP_LIMIT):
        gram = (work.T @ work).tolist()
        rot = np.eye(n).tolist()
        rotated = False
        converged = True
        for p in range(n - 1):
            for q in range(p + 1, n):
                # Rotation updates can leave a vanishing diagonal entry a hair
                # below zero; clamp before the square root.
                alpha = max(gram[p][p], 0.0)
                beta = max(gram[q][q], 0.0)
                gamma = gram[p][q]
                denom = math.sqrt(alpha * beta)
                if denom <= 0.0:
                    continue
                if abs(gamma) <= SVD_OFFDIAG_TOL * denom:
                    continue
                converged = False
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for r in range(n):
                    grp, grq = gram[r][p], gram[r][q]
                    gram[r][p] = c * grp - s * grq
                    gram[r][q] = s * grp + c * grq
                for r in range(n):
                    gpr, gqr = gram[p][r], gram[q][r]
                    gram[p][r] = c * gpr - s * gqr
                    gram[q][r] = s * gpr + c * gqr
                for r in range(n):
                    rrp, rrq = rot[r][p], rot[r][q]
                    rot[r][p] = c * rrp - s * rrq
                    rot[r][q] = s * rrp + c * rrq
        if rotated:
            rot_arr = np.array(rot)
            work = work @ rot_arr
            v = v @ rot_arr
        if converged:
            break

    sigma = np.sqrt((work * work).sum(axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]

    u = _normalize_columns(work, sigma)
    if transposed:
        return SvdResult(u=v, singular_values=sigma, v=u)
    return SvdResult(u=u, singular_values=sigma, v=v)


def _normalize_columns(work: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Normalize orthogonal columns; complete numerically-zero ones to a basis."""
    m, n = work.shape
    smax = float(sigma[0]) if n else 0.0
    cols: list[np.ndarray | None] = []
    for i in range(n):
        if sigma[i] > smax * 1e-14 and sigma[i] > 0.0:
            cols.append(work[:, i] / sigma[i])
        else:
            cols.append(None)
    basis = [col for col in cols if col is not None]
    probe = 0
    for i in range(n):
        if cols[i] is not None:
            continue
        while True:
            cand = np.zeros(m)
            cand[probe % m] = 1.0
            probe += 1
            for b in basis:
                cand = cand - (cand @ b) * b
            nrm = float(np.linalg.norm(cand))
            if nrm > 1e-6:
                cols[i] = cand / nrm
                basis.append(cols[i])
                break
    return np.column_stack(cols)


def nuclear_norm(a) -> float:
    """Sum of singular values; zero exactly when ``a`` is the zero matrix."""
    return float(svd(a).singular_values.sum())


def nuclear_norm_grad(a) -> np.ndarray:
    """Gradient ``u @ v.T`` of the nuclear norm at a full-rank point.

    Raises :class:`DegenerateSubgradientError` when the smallest singular
    value is at most ``RANK_TOL``; the subgradient is then not unique and the
    caller must choose how to proceed.
    """
    res = svd(a)
    smin = float(res.singular_values[-1]) if res.singular_values.size else 0.0
    if smin <= RANK_TOL:
        raise DegenerateSubgradientError(
            f"smallest singular value {smin:.3e} <= {RANK_TOL:.0e}; "
            "nuclear norm gradient is not unique here"
        )
    return res.u @ res.v.T


@dataclass
class KMeansModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float


def kmeans(points, c: int, seed: int) -> KMeansModel:
    """Lloyd's algorithm with k-means++ seeding.

    Deterministic for fixed ``(points, c, seed)``. Nearest-centroid ties break
    toward the lowest index; a cluster emptied during iteration is re-seeded
    with the point farthest from its assigned centroid. Iteration stops when
    assignments are stable or after ``KMEANS_ITER_LIMIT`` rounds.
    """
    pts = as_matrix(points, "points")
    n = pts.shape[0]
    if c < 1 or c > n:
        raise ShapeError(f"cluster count {c} must be between 1 and the {n} points given")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(pts, c, rng)
    assignments = _nearest(pts, centroids)
    prev_inertia = math.inf
    for _ in range(KMEANS_ITER_LIMIT):
        for k in range(c):
            mask = assignments == k
            if mask.any():
                centroids[k] = pts[mask].mean(axis=0)
        _repair_empty(pts, centroids, assignments, c)
        new_assignments = _nearest(pts, centroids)
        inertia = _inertia(pts, centroids, new_assignments)
        assert inertia <= prev_inertia + 1e-9 * max(1.0, abs(prev_inertia)), (
            f"inertia increased: {prev_inertia} -> {inertia}"
        )
        prev_inertia = inertia
        if (new_assignments == assignments).all():
            assignments = new_assignments
            break
        assignments = new_assignments
    return KMeansModel(
        centroids=centroids,
        assignments=assignments,
        inertia=_inertia(pts, centroids, assignments),
    )


def _kmeanspp_init(pts: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    n = pts.shape[0]
    centroids = np.empty((c, pts.shape[1]))
    centroids[0] = pts[int(rng.integers(n))]
    dist_sq = ((pts - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, c):
        total = float(dist_sq.sum())
        if total <= 0.0:
            idx = int(np.argmax(dist_sq))
        else:
            idx = int(rng.choice(n, p=dist_sq / total))
        centroids[i] = pts[idx]
        dist_sq = np.minimum(dist_sq, ((pts - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _nearest(pts: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # |x - c|^2 = |c|^2 - 2 x.c + |x|^2; the |x|^2 term is constant per row
    # and cannot change the argmin, so it is dropped.
    scores = (centroids * centroids).sum(axis=1)[None, :] - 2.0 * (pts @ centroids.T)
    return np.argmin(scores, axis=1)


def _inertia(pts: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    return float(((pts - centroids[assignments]) ** 2).sum())


def _repair_empty(pts, centroids, assignments, c) -> None:
    for k in range(c):
        if (assignments == k).any():
            continue
        dist = ((pts - centroids[assignments]) ** 2).sum(axis=1)
        idx = int(np.argmax(dist))
        centroids[k] = pts[idx]
        assignments[idx] = k
