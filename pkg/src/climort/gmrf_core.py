"""Structured GMRF precision blocks and constrained Gaussian operations.

Builds first-order random-walk structures, Kronecker interaction
structures with their identifiability constraints, and provides solve /
sample / marginal-variance / log-determinant routines for Gaussians
subject to hard linear constraints (conditioning by kriging).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalError, ValidationError
from .geo_graph import PrecisionStructure

JITTER_SCALE = 1e-8          # relative diagonal jitter for intrinsic (singular) precisions
CONSTRAINT_TOL = 1e-8        # max |A x| allowed on any constrained result
DENSE_CUTOFF = 5000          # latent dim up to which exact dense subspace algebra is used
DEFAULT_INTERACTION_CAP = 50_000
MIN_VARIANCE_DRAWS = 2000


# ---------------------------------------------------------------------------
# constraint sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintSet:
    """Hard linear constraints A x = 0.

    Rows are linearly independent; sets built through :meth:`from_rows`
    or :meth:`block_stack` additionally have orthonormal rows, which the
    projection helpers rely on.
    """

    matrix: np.ndarray

    @property
    def n_constraints(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def residual(self, x: np.ndarray) -> float:
        if self.n_constraints == 0:
            return 0.0
        return float(np.max(np.abs(self.matrix @ x)))

    def _rows_orthonormal(self) -> bool:
        cached = getattr(self, "_orthonormal", None)
        if cached is None:
            A = self.matrix
            gram = A @ A.T
            cached = bool(np.allclose(gram, np.eye(self.n_constraints), atol=1e-12))
            object.__setattr__(self, "_orthonormal", cached)
        return cached

    def project(self, x: np.ndarray) -> np.ndarray:
        """Orthogonal projection of x onto the constraint surface."""
        if self.n_constraints == 0:
            return x
        A = self.matrix
        if self._rows_orthonormal():
            return x - A.T @ (A @ x)
        return x - A.T @ np.linalg.solve(A @ A.T, A @ x)

    @staticmethod
    def empty(dim: int) -> "ConstraintSet":
        return ConstraintSet(np.zeros((0, dim)))

    @staticmethod
    def from_rows(rows: np.ndarray, tol: float = 1e-10) -> "ConstraintSet":
        """Deduplicate possibly dependent rows into an orthonormal constraint set."""
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[0] == 0:
            return ConstraintSet.empty(rows.shape[1])
        _, s, vt = np.linalg.svd(rows, full_matrices=False)
        keep = s > tol * s[0]
        return ConstraintSet(vt[keep])

    @staticmethod
    def block_stack(blocks: list[tuple[int, "ConstraintSet"]], total_dim: int) -> "ConstraintSet":
        """Place per-block constraint sets at their offsets in a larger vector.

        Blocks act on disjoint coordinate ranges, so orthonormality and
        independence carry over to the stacked set.
        """
        rows = []
        for offset, cs in blocks:
            k, d = cs.matrix.shape
            if k == 0:
                continue
            row = np.zeros((k, total_dim))
            row[:, offset:offset + d] = cs.matrix
            rows.append(row)
        if not rows:
            return ConstraintSet.empty(total_dim)
        return ConstraintSet(np.vstack(rows))


def sum_to_zero_constraint(dim: int) -> ConstraintSet:
    return ConstraintSet(np.full((1, dim), 1.0 / np.sqrt(dim)))


def null_space_basis(constraints: ConstraintSet) -> np.ndarray:
    """Orthonormal basis (columns) of the constraint surface {A x = 0}."""
    if constraints.n_constraints == 0:
        return np.eye(constraints.dim)
    return sla.null_space(constraints.matrix)


# ---------------------------------------------------------------------------
# structure builders
# ---------------------------------------------------------------------------

def build_rw1(n: int) -> PrecisionStructure:
    """First-order random-walk structure matrix of dimension n.

    Tridiagonal with diagonal (1, 2, ..., 2, 1) and -1 off-diagonals;
    the quadratic form is the sum of squared first differences. Rank
    deficiency 1 with the normalized constant vector as null basis.
    """
    if n < 2:
        raise ValidationError(f"random-walk structure needs n >= 2, got {n}")
    main = np.full(n, 2.0)
    main[0] = main[-1] = 1.0
    off = np.full(n - 1, -1.0)
    mat = sp.diags([off, main, off], offsets=[-1, 0, 1], format="csr")
    null = np.full((n, 1), 1.0 / np.sqrt(n))
    return PrecisionStructure(n, mat, 1, null)


@dataclass(frozen=True)
class InteractionStructure:
    """Kronecker-product interaction structure with its constraint set.

    The precision is left.matrix (x) right.matrix; the constraint rows
    span its null space exactly, so the number of constraints equals the
    rank deficiency dim_L * dim_R - rank_L * rank_R.
    """

    left: PrecisionStructure
    right: PrecisionStructure
    precision: PrecisionStructure
    constraints: ConstraintSet


def interaction_constraint_count(dim_left: int, def_left: int,
                                 dim_right: int, def_right: int) -> int:
    """Closed-form rank deficiency of a Kronecker interaction structure."""
    rank_l = dim_left - def_left
    rank_r = dim_right - def_right
    return dim_left * dim_right - rank_l * rank_r


def build_interaction(left: PrecisionStructure, right: PrecisionStructure,
                      max_dim: int = DEFAULT_INTERACTION_CAP) -> InteractionStructure:
    """Build a fully structured interaction between two margin structures.

    The joint precision is the Kronecker product of the margin structure
    matrices (left index major, right index minor). Its null space is
    spanned by null(left) (x) R^J together with R^I (x) null(right); an
    orthonormal basis is assembled from the margins' null bases and used
    directly as the constraint rows.
    """
    dim = left.dim * right.dim
    if dim > max_dim:
        raise ValidationError(
            f"interaction dimension {left.dim}x{right.dim}={dim} exceeds cap {max_dim}; "
            "use desk-scale dimensions or raise the cap explicitly"
        )
    kron = sp.kron(left.matrix, right.matrix, format="csr")
    parts = []
    if left.rank_deficiency > 0:
        parts.append(np.kron(left.null_basis, np.eye(right.dim)))
    if right.rank_deficiency > 0:
        if left.rank_deficiency > 0:
            # complement of null(left) avoids double-counting null (x) null
            comp = sla.null_space(left.null_basis.T)
        else:
            comp = np.eye(left.dim)
        if comp.shape[1] > 0:
            parts.append(np.kron(comp, right.null_basis))
    null = np.hstack(parts) if parts else np.zeros((dim, 0))
    deficiency = interaction_constraint_count(
        left.dim, left.rank_deficiency, right.dim, right.rank_deficiency)
    if null.shape[1] != deficiency:
        raise NumericalError(
            f"interaction null basis has {null.shape[1]} columns, expected {deficiency}")
    precision = PrecisionStructure(dim, kron, deficiency, null)
    return InteractionStructure(left, right, precision, ConstraintSet(null.T.copy()))


# ---------------------------------------------------------------------------
# sparse symmetric factorization
# ---------------------------------------------------------------------------

class GmrfFactor:
    """Sparse symmetric factorization Q = P^T L D L^T P of a precision matrix.

    Uses SuperLU in symmetric mode, which yields an LDL^T factorization
    with a fill-reducing symmetric permutation. When Q alone is singular
    (intrinsic priors, confounded fixed/random directions) and the
    constraint set that restores definiteness is supplied, the factored
    matrix is Q + c A^T A, which agrees with Q exactly on the constraint
    surface {A x = 0}: constrained solves, log-determinants and
    conditional samples built on it are exact. Without constraints a
    diagonal jitter of JITTER_SCALE times the largest diagonal entry is
    added instead; its effect is removed by kriging correction plus
    iterative refinement up to tolerance.
    """

    def __init__(self, Q: sp.spmatrix, constraints: ConstraintSet | None = None,
                 jitter_scale: float = JITTER_SCALE, assume_singular: bool = False,
                 constraint_gram: sp.spmatrix | None = None):
        Q = sp.csc_matrix(Q)
        if Q.shape[0] != Q.shape[1]:
            raise ValidationError("precision matrix must be square")
        self.n = Q.shape[0]
        self.matrix = Q
        self.jitter = 0.0
        self.augmented = False
        max_diag = float(np.max(Q.diagonal())) if self.n else 1.0
        if not np.isfinite(max_diag) or max_diag <= 0:
            raise NumericalError("precision matrix has a non-positive diagonal")
        have_constraints = constraints is not None and constraints.n_constraints
        self._lu = None
        if not (assume_singular and have_constraints):
            self._lu = self._attempt(Q)
        if self._lu is None and have_constraints:
            if constraint_gram is None:
                A = sp.csr_matrix(constraints.matrix)
                constraint_gram = A.T @ A
            self._lu = self._attempt((Q + max_diag * constraint_gram).tocsc())
            self.augmented = self._lu is not None
        if self._lu is None:
            self.jitter = jitter_scale * max_diag
            self._lu = self._attempt(Q + self.jitter * sp.identity(self.n, format="csc"))
        if self._lu is None:
            raise NumericalError("factorization failed even after diagonal jitter")
        self._pivots = self._lu.U.diagonal()
        self._checked_sqrt = False

    @staticmethod
    def _attempt(Q):
        try:
            lu = spla.splu(Q, diag_pivot_thresh=0.0, permc_spec="MMD_AT_PLUS_A",
                           options=dict(SymmetricMode=True))
        except RuntimeError:
            return None
        d = lu.U.diagonal()
        if not np.all(np.isfinite(d)) or np.min(d) <= 1e-13 * max(1.0, np.max(d)):
            return None
        return lu

    @property
    def jittered(self) -> bool:
        return self.jitter > 0.0

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))

    def logdet(self) -> float:
        return float(np.sum(np.log(self._pivots)))

    def _check_sqrt(self):
        # sampling relies on U == D L^T and a shared row/column permutation
        if self._checked_sqrt:
            return
        lu = self._lu
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NumericalError("factorization permutations differ; cannot sample")
        diff = lu.U - sp.diags(self._pivots) @ lu.L.T.tocsc()
        err = np.max(np.abs(diff.data)) if diff.nnz else 0.0
        if err > 1e-8 * max(1.0, float(np.max(self._pivots))):
            raise NumericalError("factorization is not LDL^T; cannot sample")
        self._checked_sqrt = True

    def sqrt_solve_t(self, z: np.ndarray) -> np.ndarray:
        """Solve G^T x = z for Q = G G^T, mapping N(0, I) draws to N(0, Q^{-1})."""
        self._check_sqrt()
        lu = self._lu
        w = z / np.sqrt(self._pivots).reshape(-1, *([1] * (z.ndim - 1)))
        y = spla.spsolve_triangular(lu.L.T.tocsr(), w, lower=False, unit_diagonal=True)
        # Q = (P^T L sqrt(D)) (sqrt(D) L^T P) with P e_i = e_perm_r[i]
        return y[lu.perm_r]


# ---------------------------------------------------------------------------
# constrained operations
# ---------------------------------------------------------------------------

class _KrigingCorrector:
    """Shared machinery: project solutions/samples onto {A x = 0}."""

    def __init__(self, factor: GmrfFactor, constraints: ConstraintSet):
        self.factor = factor
        self.constraints = constraints
        A = constraints.matrix
        if constraints.n_constraints:
            self.W = factor.solve(A.T)                      # Q^{-1} A^T, n x k
            S = A @ self.W
            try:
                self.S_cho = sla.cho_factor(S)
                self.AAt_cho = sla.cho_factor(A @ A.T)
            except np.linalg.LinAlgError as exc:
                raise NumericalError("constraints are linearly dependent") from exc

    def correct(self, x: np.ndarray) -> np.ndarray:
        """Kriging correction onto {A x = 0}; works on vectors or column stacks.

        A jittered factorization leaves roundoff junk along the
        constraint directions (huge null-space components cancel
        inexactly), so the kriging step is followed by an exact
        orthogonal projection.
        """
        if not self.constraints.n_constraints:
            return x
        A = self.constraints.matrix
        x = x - self.W @ sla.cho_solve(self.S_cho, A @ x)
        return x - A.T @ sla.cho_solve(self.AAt_cho, A @ x)

    def csolve(self, rhs: np.ndarray) -> np.ndarray:
        return self.correct(self.factor.solve(rhs))


def constrained_solve(Q: sp.spmatrix, b: np.ndarray, constraints: ConstraintSet,
                      factor: GmrfFactor | None = None,
                      refine_tol: float = 1e-12, max_refine: int = 4) -> np.ndarray:
    """Minimize (1/2) x^T Q x - b^T x subject to A x = 0.

    Solves with a sparse symmetric factorization of Q followed by
    kriging correction. When the factorization needed a diagonal jitter,
    a few iterative-refinement passes against the unjittered Q restore
    full accuracy on the constraint surface.
    """
    factor = factor or GmrfFactor(Q, constraints)
    corr = _KrigingCorrector(factor, constraints)
    x = corr.csolve(b)
    if factor.jittered:
        scale = max(1.0, float(np.max(np.abs(b))))
        A = constraints.matrix
        for _ in range(max_refine):
            r = b - Q @ x
            r_proj = r - A.T @ (A @ r) if constraints.n_constraints else r
            if np.max(np.abs(r_proj)) <= refine_tol * scale:
                break
            x = x + corr.csolve(r)
    res = constraints.residual(x)
    if res > CONSTRAINT_TOL:
        raise NumericalError(f"constraint residual {res:.3e} exceeds tolerance")
    return x


def constrained_sample(Q: sp.spmatrix, constraints: ConstraintSet, count: int, seed: int,
                       mean: np.ndarray | None = None,
                       factor: GmrfFactor | None = None) -> np.ndarray:
    """Draw `count` samples from N(mean, Q^{-1}) conditioned on A x = 0.

    Unconstrained draws come from back-substitution on standard normal
    vectors; each is then kriging-corrected. The mean, if given, must
    already satisfy the constraints. Deterministic for a fixed seed.
    """
    n = Q.shape[0]
    if count < 0:
        raise ValidationError("sample count must be non-negative")
    if count == 0:
        return np.zeros((0, n))
    factor = factor or GmrfFactor(Q, constraints)
    corr = _KrigingCorrector(factor, constraints)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, count))
    x = corr.correct(factor.sqrt_solve_t(z))
    if mean is not None:
        x = x + mean[:, None]
    return x.T


def constrained_marginal_variances(Q: sp.spmatrix, constraints: ConstraintSet,
                                   method: str = "auto",
                                   dense_cutoff: int = DENSE_CUTOFF,
                                   ndraws: int = MIN_VARIANCE_DRAWS, seed: int = 0,
                                   basis: np.ndarray | None = None) -> np.ndarray:
    """Marginal variances of the constrained Gaussian N(., Q^{-1} | A x = 0).

    Exact via dense subspace inversion up to `dense_cutoff`, otherwise by
    constrained sampling with at least MIN_VARIANCE_DRAWS draws.
    """
    n = Q.shape[0]
    if method == "auto":
        method = "dense" if n <= dense_cutoff else "sample"
    if method == "dense":
        B = basis if basis is not None else null_space_basis(constraints)
        K = B.T @ (Q @ B)
        L = sla.cholesky(K, lower=True)
        G = sla.solve_triangular(L, B.T, lower=True)
        return np.einsum("ij,ij->j", G, G)
    if method == "sample":
        if ndraws < MIN_VARIANCE_DRAWS:
            raise ValidationError(
                f"marginal variances by sampling need >= {MIN_VARIANCE_DRAWS} draws, got {ndraws}")
        draws = constrained_sample(Q, constraints, ndraws, seed)
        return draws.var(axis=0, ddof=1)
    raise ValidationError(f"unknown marginal-variance method {method!r}")


def constrained_logdet(Q: sp.spmatrix, constraints: ConstraintSet,
                       method: str = "auto", dense_cutoff: int = DENSE_CUTOFF,
                       generalized: bool = False,
                       basis: np.ndarray | None = None,
                       factor: GmrfFactor | None = None,
                       eig_tol: float = 1e-9) -> tuple[float, int]:
    """Log-determinant of B^T Q B for B an orthonormal basis of {A x = 0}.

    Returns (logdet, n_flat). With `generalized`, eigenvalues below
    eig_tol times the largest are treated as flat (improper) directions:
    they are skipped and counted in n_flat. The dense path is exact; the
    sparse path uses logdet(Q) + logdet(A Q^{-1} A^T) - logdet(A A^T)
    on the (possibly jittered) factorization.
    """
    n = Q.shape[0]
    if method == "auto":
        method = "dense" if n <= dense_cutoff else "sparse"
    if method == "dense":
        B = basis if basis is not None else null_space_basis(constraints)
        K = B.T @ (Q @ B)
        if generalized:
            eig = sla.eigvalsh(K)
            cutoff = eig_tol * max(eig[-1], 1.0)
            flat = int(np.sum(eig <= cutoff))
            return float(np.sum(np.log(eig[eig > cutoff]))), flat
        L = sla.cholesky(K, lower=True)
        return float(2.0 * np.sum(np.log(np.diag(L)))), 0
    if method == "sparse":
        if generalized:
            raise ValidationError("generalized log-determinants need the dense path")
        factor = factor or GmrfFactor(Q, constraints)
        val = factor.logdet()
        if constraints.n_constraints:
            A = constraints.matrix
            S = A @ factor.solve(A.T)
            val += float(np.linalg.slogdet(S)[1])
            val -= float(np.linalg.slogdet(A @ A.T)[1])
        return val, 0
    raise ValidationError(f"unknown log-determinant method {method!r}")


def write_coo(path, matrix: sp.spmatrix) -> None:
    """Dump a sparse matrix as zero-based `row col value` text lines."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {float(v)!r}\n")
