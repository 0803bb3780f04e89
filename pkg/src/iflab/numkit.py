"""Dense vector kernels, Krylov solvers, top-k eigensolvers, and statistics helpers.

Everything here is float64 and deterministic: identical inputs (including
seeds) give bit-identical outputs. Reductions go through numpy, whose
summation order is fixed for a given array shape, so repeated runs on the
same platform reproduce results exactly.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats as _scipy_stats

from .errors import (
    DegenerateInput,
    DimTooLarge,
    IndefiniteDetected,
    KrylovBreakdownWarning,
    NonFiniteError,
)

DEFAULT_TOL = 1e-8
DENSE_DIM_LIMIT = 2000


def as_vector(entries) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(entries, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("vector has non-finite entries")
    return v


def default_max_iter(dim: int) -> int:
    return min(10 * dim, 1000)


@dataclass(frozen=True)
class LinearOperator:
    """Matrix-free linear map on R^dim.

    `matvec` must be deterministic and linear; set `symmetric` only when
    u'Av = v'Au holds (Hessians, dense symmetric matrices).
    """

    dim: int
    matvec: Callable[[np.ndarray], np.ndarray]
    symmetric: bool = False

    def __call__(self, v: np.ndarray) -> np.ndarray:
        out = self.matvec(v)
        if out.shape != (self.dim,):
            raise ValueError(f"operator returned shape {out.shape}, expected ({self.dim},)")
        return out

    @staticmethod
    def from_matrix(a: np.ndarray, symmetric: bool | None = None) -> "LinearOperator":
        a = np.asarray(a, dtype=np.float64)
        if symmetric is None:
            symmetric = bool(np.allclose(a, a.T, rtol=1e-12, atol=1e-12))
        return LinearOperator(dim=a.shape[0], matvec=lambda v: a @ v, symmetric=symmetric)

    def shifted(self, damping: float) -> "LinearOperator":
        """Operator v -> Av + damping*v (scalar Tikhonov shift)."""
        if damping == 0.0:
            return self
        base = self.matvec
        return LinearOperator(
            dim=self.dim,
            matvec=lambda v, _b=base, _d=float(damping): _b(v) + _d * v,
            symmetric=self.symmetric,
        )


@dataclass
class SolveReport:
    """Outcome of a Krylov solve; `converged` means residual <= tol*||b||."""

    solution: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    residual_history: list[float] = field(default_factory=list)


@dataclass
class EigPair:
    value: float
    vector: np.ndarray


def conjugate_residual(
    A: LinearOperator,
    b,
    tol: float = DEFAULT_TOL,
    max_iter: int | None = None,
    damping: float = 0.0,
    reorthogonalize: bool = True,
) -> SolveReport:
    """Solve (A + damping*I) x = b for symmetric A by residual-norm minimization.

    Works for indefinite operators, unlike conjugate_gradient: each step
    minimizes ||r|| over the span of the search directions, so the residual
    norm is non-increasing regardless of the spectrum's signs.

    With `reorthogonalize` (the default at desk scale) new directions are
    orthogonalized against the full history of A-images, which restores the
    exact-arithmetic finite-termination property that the two-term
    recurrence loses to rounding. Both variants coincide in exact
    arithmetic; set it False for the classic O(dim) memory recurrence.
    """
    if not A.symmetric:
        raise ValueError("conjugate_residual requires a symmetric operator")
    if damping < 0:
        raise ValueError("damping must be nonnegative")
    b = as_vector(b)
    op = A.shifted(damping)
    n = A.dim
    if max_iter is None:
        max_iter = default_max_iter(n)

    x = np.zeros(n)
    r = b.copy()
    bnorm = float(np.linalg.norm(b))
    rnorm = bnorm
    history = [rnorm]
    if bnorm == 0.0:
        return SolveReport(x, 0.0, 0, True, history)

    dirs: list[np.ndarray] = []   # search directions p_i
    imgs: list[np.ndarray] = []   # q_i = (A + damping I) p_i, kept mutually orthogonal
    img_norms2: list[float] = []

    iterations = 0
    for k in range(max_iter):
        if rnorm <= tol * bnorm:
            break
        p = r.copy()
        q = op(p)
        if reorthogonalize:
            for pi, qi, qn2 in zip(dirs, imgs, img_norms2):
                beta = float(q @ qi) / qn2
                p -= beta * pi
                q -= beta * qi
        elif dirs:
            beta = float(q @ imgs[-1]) / img_norms2[-1]
            p -= beta * dirs[-1]
            q -= beta * imgs[-1]
        qn2 = float(q @ q)
        if not np.isfinite(qn2) or qn2 == 0.0:
            raise NonFiniteError("conjugate residual breakdown: search direction image vanished")
        alpha = float(r @ q) / qn2
        x += alpha * p
        r -= alpha * q
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("conjugate residual produced a non-finite iterate")
        dirs.append(p)
        imgs.append(q)
        img_norms2.append(qn2)
        rnorm = float(np.linalg.norm(r))
        history.append(rnorm)
        iterations = k + 1

    return SolveReport(x, rnorm, iterations, rnorm <= tol * bnorm, history)


def conjugate_gradient(
    A: LinearOperator,
    b,
    tol: float = DEFAULT_TOL,
    max_iter: int | None = None,
) -> SolveReport:
    """Textbook conjugate gradient; correct only for positive-definite A.

    Exposed alongside conjugate_residual to demonstrate its failure mode on
    indefinite operators: p'Ap <= 0 raises IndefiniteDetected with the
    partial report attached.
    """
    if not A.symmetric:
        raise ValueError("conjugate_gradient requires a symmetric operator")
    b = as_vector(b)
    n = A.dim
    if max_iter is None:
        max_iter = default_max_iter(n)

    x = np.zeros(n)
    r = b.copy()
    bnorm = float(np.linalg.norm(b))
    rnorm = bnorm
    history = [rnorm]
    if bnorm == 0.0:
        return SolveReport(x, 0.0, 0, True, history)
    p = r.copy()
    rs = float(r @ r)

    iterations = 0
    for k in range(max_iter):
        if rnorm <= tol * bnorm:
            break
        ap = A(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            raise IndefiniteDetected(
                f"p'Ap = {pap:.3e} <= 0 at iteration {k}: operator is not positive definite",
                report=SolveReport(x, rnorm, iterations, False, history),
            )
        alpha = rs / pap
        x += alpha * p
        r -= alpha * ap
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("conjugate gradient produced a non-finite iterate")
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        rnorm = float(np.sqrt(rs_new))
        history.append(rnorm)
        iterations = k + 1

    return SolveReport(x, rnorm, iterations, rnorm <= tol * bnorm, history)


def _eig_order(values: np.ndarray) -> np.ndarray:
    """Stable ranking: |value| descending, then signed value descending, then discovery index."""
    idx = np.arange(len(values))
    key = sorted(idx, key=lambda i: (-abs(values[i]), -values[i], i))
    return np.asarray(key, dtype=np.int64)


def topk_eigs(
    A: LinearOperator,
    k: int,
    num_iters: int,
    seed: int,
) -> list[EigPair]:
    """Top-k eigenpairs by |value| of a symmetric operator.

    Lanczos iteration with full reorthogonalization (the symmetric
    specialization of Arnoldi), started from a seeded random unit vector.
    Returns EigPairs sorted by |value| descending. If the Krylov subspace
    becomes invariant before k pairs exist, the pairs found so far are
    returned and a KrylovBreakdownWarning is issued.
    """
    if not A.symmetric:
        raise ValueError("topk_eigs requires a symmetric operator")
    n = A.dim
    if not (1 <= k <= num_iters <= n):
        raise ValueError(f"need 1 <= k <= num_iters <= dim, got k={k}, num_iters={num_iters}, dim={n}")

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)

    basis = np.zeros((num_iters, n))
    alphas: list[float] = []
    betas: list[float] = []
    m = 0
    scale = 0.0
    for j in range(num_iters):
        basis[j] = v
        w = A(v)
        alpha = float(v @ w)
        alphas.append(alpha)
        m = j + 1
        w -= alpha * v
        if j > 0:
            w -= betas[-1] * basis[j - 1]
        # full reorthogonalization, twice for numerical safety
        for _ in range(2):
            w -= basis[: j + 1].T @ (basis[: j + 1] @ w)
        beta = float(np.linalg.norm(w))
        scale = max(scale, abs(alpha), beta)
        if j + 1 == num_iters:
            break
        if beta <= 1e-12 * max(1.0, scale):
            break  # invariant subspace found
        betas.append(beta)
        v = w / beta

    tri = np.diag(np.asarray(alphas[:m]))
    if m > 1:
        off = np.asarray(betas[: m - 1])
        tri += np.diag(off, 1) + np.diag(off, -1)
    ritz_vals, ritz_vecs = np.linalg.eigh(tri)
    order = _eig_order(ritz_vals)

    pairs = []
    for i in order[: min(k, m)]:
        vec = basis[:m].T @ ritz_vecs[:, i]
        vec /= np.linalg.norm(vec)
        pairs.append(EigPair(value=float(ritz_vals[i]), vector=vec))
    if len(pairs) < k:
        warnings.warn(
            f"Krylov subspace degenerated after {m} iterations; returning {len(pairs)} of {k} pairs",
            KrylovBreakdownWarning,
        )
    return pairs


def dense_sym_eig(a: np.ndarray) -> list[EigPair]:
    """All eigenpairs of a dense symmetric matrix, ordered by |value| descending.

    Desk-scale oracle path; guarded so it is never accidentally applied to
    a large model.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {a.shape}")
    if n > DENSE_DIM_LIMIT:
        raise DimTooLarge(f"dense eigensolve limited to dim <= {DENSE_DIM_LIMIT}, got {n}")
    values, vectors = np.linalg.eigh(a)
    order = _eig_order(values)
    return [EigPair(value=float(values[i]), vector=vectors[:, i].copy()) for i in order]


def pearson(xs, ys) -> float:
    """Pearson correlation coefficient.

    Raises DegenerateInput on short or constant inputs instead of returning
    a fabricated 0, so callers must record those steps as missing.
    """
    xs = as_vector(xs)
    ys = as_vector(ys)
    if len(xs) != len(ys):
        raise DegenerateInput("sequences must have equal length")
    if len(xs) < 3:
        raise DegenerateInput(f"need at least 3 points, got {len(xs)}")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sx = float(dx @ dx)
    sy = float(dy @ dy)
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInput("constant input sequence")
    r = float(dx @ dy) / np.sqrt(sx * sy)
    return float(min(1.0, max(-1.0, r)))


def linfit(xs, ys) -> tuple[float, float, float]:
    """Ordinary least squares line fit: returns (slope, intercept, r_squared)."""
    xs = as_vector(xs)
    ys = as_vector(ys)
    if len(xs) != len(ys):
        raise DegenerateInput("sequences must have equal length")
    if len(xs) < 2:
        raise DegenerateInput(f"need at least 2 points, got {len(xs)}")
    dx = xs - xs.mean()
    sx = float(dx @ dx)
    if sx == 0.0:
        raise DegenerateInput("xs is constant")
    slope = float(dx @ (ys - ys.mean())) / sx
    intercept = float(ys.mean() - slope * xs.mean())
    dy = ys - ys.mean()
    ss_tot = float(dy @ dy)
    if ss_tot == 0.0:
        return slope, intercept, 0.0
    resid = ys - (slope * xs + intercept)
    r2 = 1.0 - float(resid @ resid) / ss_tot
    return slope, intercept, float(min(1.0, max(0.0, r2)))


def mean_ci(samples, level: float = 0.95) -> tuple[float, float, float]:
    """Student-t confidence interval on the mean: returns (mean, lo, hi)."""
    samples = as_vector(samples)
    n = len(samples)
    if n < 2:
        raise DegenerateInput(f"need at least 2 samples, got {n}")
    if not (0.0 < level < 1.0):
        raise DegenerateInput(f"level must be in (0, 1), got {level}")
    mean = float(samples.mean())
    sd = float(samples.std(ddof=1))
    half = float(_scipy_stats.t.ppf(0.5 * (1.0 + level), n - 1)) * sd / np.sqrt(n)
    return mean, mean - half, mean + half
