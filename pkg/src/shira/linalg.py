"""Dense linear algebra used throughout the package.

Matrices are plain 2-D ``float64`` numpy arrays. The SVD is a one-sided
(Hestenes) Jacobi iteration with a round-robin pair ordering, so each step
rotates ``n // 2`` disjoint column pairs at once.

Random matrices come from numpy's ``PCG64`` bit generator
(``numpy.random.default_rng(seed)``): Gaussian draws use the ziggurat
sampler of ``Generator.standard_normal`` and uniform draws use
``Generator.uniform``. Both are stable across numpy releases for a fixed seed.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

DEFAULT_RANK_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


def as_matrix(m, name="matrix"):
    """Return ``m`` as a finite 2-D float64 array (no copy when possible)."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {a.shape}")
    if not np.isfinite(a).all():
        raise NumericError(f"{name} contains NaN or Inf")
    return a


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(m):
    return as_matrix(m).T.copy()


def _round_robin(n):
    """Pair schedule covering every (p, q), p < q, once per sweep.

    Returns a list of ``(p, q)`` index arrays; pairs within a round are
    disjoint. Odd ``n`` gets a dummy player that is dropped.
    """
    players = list(range(n + (n % 2)))
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            p, q = players[i], players[size - 1 - i]
            if p >= n or q >= n:
                continue
            ps.append(min(p, q))
            qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u, keep):
    """Replace columns of ``u`` not in ``keep`` by an orthonormal completion."""
    rows, cols = u.shape
    missing = np.flatnonzero(~keep)
    if missing.size == 0:
        return u
    known = u[:, keep]
    q, _ = np.linalg.qr(np.hstack([known, np.eye(rows)]))
    filler = q[:, known.shape[1]:known.shape[1] + missing.size]
    out = u.copy()
    out[:, missing] = filler
    return out


def svd(m, max_sweeps=JACOBI_MAX_SWEEPS, tol=JACOBI_TOL):
    """Thin SVD ``m = U @ diag(s) @ Vt`` by one-sided Jacobi rotations.

    ``s`` is non-increasing with length ``min(m.shape)``. Columns of ``U``
    belonging to zero singular values are an arbitrary orthonormal completion.

    Raises
    ------
    NumericError
        If some column pair is still non-orthogonal (relative cosine above
        ``tol``) after ``max_sweeps`` sweeps.
    """
    a = as_matrix(m)
    transposed = a.shape[0] < a.shape[1]
    work = (a.T if transposed else a).copy()
    n = work.shape[1]
    v = np.eye(n)
    fro = np.linalg.norm(work)
    # columns at or below roundoff of the whole matrix count as zero
    floor = (np.finfo(np.float64).eps * fro) ** 2
    schedule = _round_robin(n)

    converged = n == 1 or fro == 0.0
    sweeps = 0
    while not converged:
        if sweeps >= max_sweeps:
            raise NumericError(f"Jacobi SVD did not converge after {sweeps} sweeps")
        sweeps += 1
        rotated = False
        for p, q in schedule:
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            live = (alpha > floor) & (beta > floor)
            active = live & (np.abs(gamma) > tol * np.sqrt(alpha * beta))
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            with np.errstate(over="ignore"):
                t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = work[:, p], work[:, q]
            work[:, p] = c * ap - s * aq
            work[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        converged = not rotated

    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    nonzero = sigma * sigma > floor
    u = np.zeros_like(work)
    u[:, nonzero] = work[:, nonzero] / sigma[nonzero]
    u = _complete_basis(u, nonzero)
    sigma = np.where(nonzero, sigma, 0.0)
    if transposed:
        return v, sigma, u.T
    return u, sigma, v.T


def singular_values(m):
    return svd(m)[1]


def truncate_rank(m, r):
    """Best rank-``r`` approximation (keeps the ``r`` largest singular triplets)."""
    a = as_matrix(m)
    if not 1 <= r <= min(a.shape):
        raise ParameterError(f"rank {r} outside [1, {min(a.shape)}]")
    u, s, vt = svd(a)
    return (u[:, :r] * s[:r]) @ vt[:r]


def spectral_norm(m):
    return float(singular_values(m)[0])


def frobenius_norm(m):
    return float(np.linalg.norm(as_matrix(m)))


def nnz(m, eps=0.0):
    """Number of entries with ``|x| > eps``."""
    if eps < 0:
        raise ParameterError("eps must be non-negative")
    return int(np.count_nonzero(np.abs(as_matrix(m)) > eps))


def numeric_rank(m, tol=DEFAULT_RANK_TOL):
    """Count of singular values above ``tol * sigma_1``."""
    if tol <= 0:
        raise ParameterError("tol must be positive")
    s = singular_values(m)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def seeded_gaussian(rows, cols, seed):
    if rows < 1 or cols < 1:
        raise ParameterError("dimensions must be positive")
    return np.random.default_rng(seed).standard_normal((rows, cols))


def seeded_uniform(rows, cols, seed, lo=0.0, hi=1.0):
    if rows < 1 or cols < 1:
        raise ParameterError("dimensions must be positive")
    return np.random.default_rng(seed).uniform(lo, hi, size=(rows, cols))
