import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from climort.errors import NumericalError, ValidationError
from climort.geo_graph import build_spatial_structure, lattice_graph
from climort.gmrf_core import (ConstraintSet, GmrfFactor, build_interaction, build_rw1,
                               constrained_logdet, constrained_marginal_variances,
                               constrained_sample, constrained_solve,
                               interaction_constraint_count, null_space_basis,
                               sum_to_zero_constraint, write_coo)

from helpers import graph_from_edges


def random_spd(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, n))
    return sp.csc_matrix(m @ m.T + n * np.eye(n))


# ---------------------------------------------------------------------------
# RW1 structure
# ---------------------------------------------------------------------------

def test_rw1_small_matrix():
    s = build_rw1(3)
    assert np.allclose(s.matrix.toarray(), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    assert s.rank_deficiency == 1


def test_rw1_quadratic_form_counts_increments():
    s = build_rw1(4)
    assert s.quadratic_form(np.array([1.0, 2.0, 3.0, 4.0])) == pytest.approx(3.0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(9)
    s9 = build_rw1(9)
    assert s9.quadratic_form(x) == pytest.approx(float(np.sum(np.diff(x) ** 2)))


def test_rw1_long_rank():
    s = build_rw1(939)
    eig = sla.eigvalsh(s.matrix.toarray())
    assert int(np.sum(eig > 1e-9 * eig[-1])) == 938
    # factorization-based deficiency detection: plain factorization refuses
    assert GmrfFactor(s.matrix).jittered


def test_rw1_rejects_tiny():
    with pytest.raises(ValidationError):
        build_rw1(1)


# ---------------------------------------------------------------------------
# interactions
# ---------------------------------------------------------------------------

def test_interaction_counts_small():
    inter = build_interaction(build_rw1(2), build_rw1(2))
    assert inter.constraints.n_constraints == 3
    assert inter.precision.rank_deficiency == 3


def test_interaction_counts_closed_form():
    # connected map graph x random walks, at the national dimensions
    assert interaction_constraint_count(94, 1, 4, 1) == 97
    assert interaction_constraint_count(94, 1, 939, 1) == 1032
    assert interaction_constraint_count(939, 1, 4, 1) == 942


def test_interaction_lattice_by_rw1():
    spatial = build_spatial_structure(lattice_graph(3, 3))
    inter = build_interaction(spatial, build_rw1(4))
    assert inter.constraints.n_constraints == 9 + 4 - 1
    null = inter.precision.null_basis
    assert np.max(np.abs(inter.precision.matrix @ null)) < 1e-9
    assert np.allclose(null.T @ null, np.eye(null.shape[1]), atol=1e-12)
    # matches a dense null-space computation
    dense_null = sla.null_space(inter.precision.matrix.toarray())
    assert dense_null.shape[1] == 12


def test_interaction_kron_entries_match_dense():
    spatial = build_spatial_structure(graph_from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)]))
    rw = build_rw1(5)
    inter = build_interaction(spatial, rw)
    dense = np.kron(spatial.matrix.toarray(), rw.matrix.toarray())
    assert np.max(np.abs(inter.precision.matrix.toarray() - dense)) < 1e-12


def test_kron_scalar_associativity():
    from climort.geo_graph import PrecisionStructure
    left = build_rw1(4)
    right = build_rw1(3)
    a = build_interaction(left, right).precision.matrix.toarray()
    scaled_left = PrecisionStructure(left.dim, 2.5 * left.matrix, left.rank_deficiency,
                                     left.null_basis)
    b = build_interaction(scaled_left, right).precision.matrix.toarray()
    assert np.max(np.abs(b - 2.5 * a)) < 1e-12


def test_kron_rank_multiplicative():
    rng = np.random.default_rng(3)
    for n_l, n_r in [(3, 4), (5, 6), (8, 8)]:
        left = build_rw1(n_l)
        right = build_rw1(n_r)
        inter = build_interaction(left, right)
        eig = sla.eigvalsh(inter.precision.matrix.toarray())
        rank = int(np.sum(eig > 1e-9 * max(eig[-1], 1.0)))
        assert rank == (n_l - 1) * (n_r - 1)


def test_interaction_dimension_cap():
    with pytest.raises(ValidationError, match="desk-scale"):
        build_interaction(build_rw1(400), build_rw1(400), max_dim=100_000)


def test_interaction_full_rank_margins_no_constraints():
    from climort.geo_graph import leroux_precision
    spatial = build_spatial_structure(lattice_graph(2, 2))
    mixed = leroux_precision(spatial, 0.5, 1.0)
    inter = build_interaction(mixed, build_rw1(3))
    assert inter.constraints.n_constraints == 4 * 3 - 4 * 2


# ---------------------------------------------------------------------------
# constrained solve
# ---------------------------------------------------------------------------

def test_constrained_solve_projects_constant_to_zero():
    Q = sp.identity(3, format="csc")
    x = constrained_solve(Q, np.ones(3), sum_to_zero_constraint(3))
    assert np.max(np.abs(x)) < 1e-12


def test_constrained_solve_keeps_zero_sum_rhs():
    Q = sp.identity(3, format="csc")
    b = np.array([1.0, 0.0, -1.0])
    x = constrained_solve(Q, b, sum_to_zero_constraint(3))
    assert np.allclose(x, b, atol=1e-12)


def test_constrained_solve_matches_dense_kkt():
    rng = np.random.default_rng(11)
    Q = random_spd(6, 11)
    b = rng.standard_normal(6)
    A = ConstraintSet.from_rows(rng.standard_normal((1, 6)))
    x = constrained_solve(Q, b, A)
    kkt = np.block([[Q.toarray(), A.matrix.T], [A.matrix, np.zeros((1, 1))]])
    oracle = np.linalg.solve(kkt, np.concatenate([b, [0.0]]))[:6]
    assert np.max(np.abs(x - oracle)) < 1e-9
    assert A.residual(x) <= 1e-8


def test_constrained_solve_scale_invariance():
    rng = np.random.default_rng(2)
    Q = random_spd(8, 2)
    b = rng.standard_normal(8)
    A = ConstraintSet.from_rows(rng.standard_normal((2, 8)))
    x1 = constrained_solve(Q, b, A)
    x2 = constrained_solve(sp.csc_matrix(Q * 7.5), 7.5 * b, A)
    assert np.max(np.abs(x1 - x2)) < 1e-9


def test_constrained_solve_singular_prior_with_full_constraints():
    # intrinsic structure: singular until restricted to the constraint surface
    rw = build_rw1(20)
    A = sum_to_zero_constraint(20)
    rng = np.random.default_rng(4)
    b = rng.standard_normal(20)
    x = constrained_solve(sp.csc_matrix(2.0 * rw.matrix), b, A)
    B = null_space_basis(A)
    oracle = B @ np.linalg.solve(B.T @ (2.0 * rw.matrix.toarray()) @ B, B.T @ b)
    assert np.max(np.abs(x - oracle)) < 1e-9
    assert A.residual(x) <= 1e-8


def test_constrained_solve_dependent_constraints_error():
    Q = random_spd(5, 9)
    rows = np.vstack([np.ones(5), 2.0 * np.ones(5)])
    with pytest.raises(NumericalError):
        constrained_solve(Q, np.ones(5), ConstraintSet(rows))


# ---------------------------------------------------------------------------
# constrained sampling
# ---------------------------------------------------------------------------

def test_constrained_sample_identity_sum_zero():
    n = 5
    draws = constrained_sample(sp.identity(n, format="csc"),
                               sum_to_zero_constraint(n), 100_000, seed=1)
    assert np.max(np.abs(draws.sum(axis=1))) < 1e-8
    target = np.eye(n) - np.full((n, n), 1.0 / n)
    assert np.max(np.abs(np.cov(draws.T) - target)) < 0.02


def test_constrained_sample_deterministic():
    Q = random_spd(6, 5)
    A = sum_to_zero_constraint(6)
    a = constrained_sample(Q, A, 16, seed=42)
    b = constrained_sample(Q, A, 16, seed=42)
    assert np.array_equal(a, b)


def test_constrained_sample_empty():
    out = constrained_sample(sp.identity(4, format="csc"), sum_to_zero_constraint(4),
                             0, seed=0)
    assert out.shape == (0, 4)


def test_constrained_sample_covariance_matches_subspace_inverse():
    rw = build_rw1(6)
    A = sum_to_zero_constraint(6)
    draws = constrained_sample(sp.csc_matrix(2.0 * rw.matrix), A, 60_000, seed=2)
    B = null_space_basis(A)
    target = B @ np.linalg.inv(B.T @ (2.0 * rw.matrix.toarray()) @ B) @ B.T
    assert np.max(np.abs(np.cov(draws.T) - target)) < 0.03
    assert np.max(np.abs(draws.sum(axis=1))) < 1e-8


def test_sample_mean_offset():
    Q = random_spd(4, 7)
    A = ConstraintSet.empty(4)
    mean = np.array([1.0, -2.0, 0.5, 3.0])
    draws = constrained_sample(Q, A, 50_000, seed=3, mean=mean)
    assert np.max(np.abs(draws.mean(axis=0) - mean)) < 0.05


# ---------------------------------------------------------------------------
# marginal variances and log-determinants
# ---------------------------------------------------------------------------

def test_marginal_variances_dense_vs_sampling():
    rw = build_rw1(8)
    A = sum_to_zero_constraint(8)
    Q = sp.csc_matrix(1.5 * rw.matrix)
    dense = constrained_marginal_variances(Q, A, method="dense")
    sampled = constrained_marginal_variances(Q, A, method="sample", ndraws=40_000, seed=9)
    B = null_space_basis(A)
    target = np.diag(B @ np.linalg.inv(B.T @ Q.toarray() @ B) @ B.T)
    assert np.max(np.abs(dense - target)) < 1e-12
    assert np.max(np.abs(sampled - dense)) < 0.05


def test_marginal_variances_draw_floor():
    with pytest.raises(ValidationError, match="draws"):
        constrained_marginal_variances(sp.identity(3, format="csc"),
                                       ConstraintSet.empty(3), method="sample", ndraws=100)


def test_constrained_logdet_dense_sparse_agree():
    Q = random_spd(12, 13)
    A = ConstraintSet.from_rows(np.random.default_rng(1).standard_normal((3, 12)))
    dense, _ = constrained_logdet(Q, A, method="dense")
    sparse_val, _ = constrained_logdet(Q, A, method="sparse")
    assert dense == pytest.approx(sparse_val, rel=1e-10)


def test_constrained_logdet_generalized_counts_flats():
    # block diagonal: a proper 2x2 block and a flat scalar coordinate
    Q = sp.block_diag([random_spd(2, 3), sp.csc_matrix((1, 1))], format="csc")
    val, flats = constrained_logdet(Q, ConstraintSet.empty(3), method="dense",
                                    generalized=True)
    assert flats == 1
    assert val == pytest.approx(np.linalg.slogdet(Q.toarray()[:2, :2])[1])


def test_factor_logdet_and_solve():
    Q = random_spd(30, 17)
    factor = GmrfFactor(Q)
    assert factor.logdet() == pytest.approx(np.linalg.slogdet(Q.toarray())[1])
    rng = np.random.default_rng(0)
    b = rng.standard_normal(30)
    assert np.max(np.abs(Q @ factor.solve(b) - b)) < 1e-8


def test_augmented_factor_exact_on_surface():
    rw = build_rw1(10)
    A = sum_to_zero_constraint(10)
    factor = GmrfFactor(sp.csc_matrix(rw.matrix), A)
    assert factor.augmented and not factor.jittered


def test_write_coo_roundtrip(tmp_path):
    Q = sp.csr_matrix(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    path = tmp_path / "q.coo"
    write_coo(path, Q)
    rows = [line.split() for line in path.read_text().strip().splitlines()]
    rebuilt = sp.coo_matrix(([float(v) for _, _, v in rows],
                             ([int(r) for r, _, _ in rows], [int(c) for _, c, _ in rows])),
                            shape=(2, 2))
    assert np.array_equal(rebuilt.toarray(), Q.toarray())


def test_constraint_set_from_rows_dedupes():
    rows = np.array([[1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
    cs = ConstraintSet.from_rows(rows)
    assert cs.n_constraints == 2
    assert np.allclose(cs.matrix @ cs.matrix.T, np.eye(2), atol=1e-12)
