"""Numerics kernel tests: Krylov solvers, eigensolvers, statistics.

Oracles are independent of the implementation under test: dense
eigendecomposition solves for the Krylov paths, the textbook formulas for
the statistics, numpy lstsq normal equations for linfit, and a published
t critical value for the confidence intervals.
"""
import numpy as np
import pytest

from iflab import numkit
from iflab.errors import DegenerateInput, DimTooLarge, IndefiniteDetected, KrylovBreakdownWarning


def random_symmetric(dim, rng, lo=0.5, hi=3.0, signs=True):
    """Q diag(lam) Q' with |lam| in [lo, hi]; mixed signs when signs=True."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    lam = rng.uniform(lo, hi, dim)
    if signs:
        lam *= rng.choice([-1.0, 1.0], dim)
    return q @ np.diag(lam) @ q.T, lam


def eig_solve_oracle(a, b):
    """Solve Ax=b through a dense eigendecomposition (independent of Krylov code)."""
    lam, q = np.linalg.eigh(a)
    return q @ ((q.T @ b) / lam)


class TestConjugateResidual:
    def test_identity(self):
        b = np.array([3.0, -1.0, 2.0])
        rep = numkit.conjugate_residual(numkit.LinearOperator.from_matrix(np.eye(3)), b)
        assert rep.converged
        assert rep.iterations == 1
        np.testing.assert_allclose(rep.solution, b, rtol=0, atol=1e-12)

    def test_diagonal(self):
        a = numkit.LinearOperator.from_matrix(np.diag([4.0, 9.0]))
        rep = numkit.conjugate_residual(a, np.array([4.0, 9.0]))
        np.testing.assert_allclose(rep.solution, [1.0, 1.0], atol=1e-10)

    def test_indefinite_matches_dense_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(5):
            a, _ = random_symmetric(10, rng)
            b = rng.standard_normal(10)
            rep = numkit.conjugate_residual(numkit.LinearOperator.from_matrix(a), b)
            assert rep.converged
            expect = eig_solve_oracle(a, b)
            rel = np.linalg.norm(rep.solution - expect) / np.linalg.norm(expect)
            assert rel <= 1e-6

    def test_within_dim_iterations(self):
        rng = np.random.default_rng(11)
        for dim in (2, 5, 17, 33, 50):
            a, _ = random_symmetric(dim, rng)
            b = rng.standard_normal(dim)
            rep = numkit.conjugate_residual(
                numkit.LinearOperator.from_matrix(a), b, max_iter=dim)
            assert rep.converged, f"dim={dim} residual {rep.residual_norm}"
            assert rep.iterations <= dim
            assert rep.residual_norm <= 1e-8 * np.linalg.norm(b)

    def test_damping_solves_shifted_system(self):
        rng = np.random.default_rng(3)
        a, _ = random_symmetric(8, rng)
        b = rng.standard_normal(8)
        rep = numkit.conjugate_residual(numkit.LinearOperator.from_matrix(a), b, damping=0.7)
        expect = eig_solve_oracle(a + 0.7 * np.eye(8), b)
        np.testing.assert_allclose(rep.solution, expect, atol=1e-7)

    def test_residual_history_monotone(self):
        rng = np.random.default_rng(5)
        a, _ = random_symmetric(20, rng)
        b = rng.standard_normal(20)
        rep = numkit.conjugate_residual(numkit.LinearOperator.from_matrix(a), b)
        hist = np.asarray(rep.residual_history)
        assert np.all(np.diff(hist) <= 1e-12 * hist[0])

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        a, _ = random_symmetric(12, rng)
        b = rng.standard_normal(12)
        op = numkit.LinearOperator.from_matrix(a)
        r1 = numkit.conjugate_residual(op, b)
        r2 = numkit.conjugate_residual(op, b)
        assert r1.solution.tobytes() == r2.solution.tobytes()


class TestConjugateGradient:
    def test_agrees_with_cr_on_spd(self):
        rng = np.random.default_rng(13)
        a, _ = random_symmetric(15, rng, signs=False)
        b = rng.standard_normal(15)
        op = numkit.LinearOperator.from_matrix(a)
        xg = numkit.conjugate_gradient(op, b).solution
        xr = numkit.conjugate_residual(op, b).solution
        assert np.linalg.norm(xg - xr) / np.linalg.norm(xr) <= 1e-7

    def test_indefinite_detected_where_cr_succeeds(self):
        a = np.diag([2.0, -1.0])
        b = np.array([2.0, -1.0])
        op = numkit.LinearOperator.from_matrix(a)
        with pytest.raises(IndefiniteDetected):
            numkit.conjugate_gradient(op, b)
        rep = numkit.conjugate_residual(op, b)
        assert rep.converged
        np.testing.assert_allclose(rep.solution, [1.0, 1.0], atol=1e-10)

    def test_partial_report_attached(self):
        a = np.diag([1.0, -3.0, 2.0])
        op = numkit.LinearOperator.from_matrix(a)
        with pytest.raises(IndefiniteDetected) as exc:
            numkit.conjugate_gradient(op, np.ones(3))
        assert exc.value.report is not None
        assert exc.value.report.converged is False


class TestTopkEigs:
    def test_diagonal_top2(self):
        op = numkit.LinearOperator.from_matrix(np.diag([5.0, -3.0, 1.0, 0.1]))
        pairs = numkit.topk_eigs(op, k=2, num_iters=4, seed=0)
        values = [p.value for p in pairs]
        np.testing.assert_allclose(values, [5.0, -3.0], atol=1e-9)

    def test_identity_single(self):
        op = numkit.LinearOperator.from_matrix(np.eye(8))
        pairs = numkit.topk_eigs(op, k=1, num_iters=8, seed=1)
        assert len(pairs) == 1
        assert abs(pairs[0].value - 1.0) <= 1e-10

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(21)
        a, _ = random_symmetric(20, rng)
        lam = np.linalg.eigvalsh(a)
        top = sorted(np.abs(lam))[::-1][:5]
        pairs = numkit.topk_eigs(numkit.LinearOperator.from_matrix(a), k=5, num_iters=20, seed=2)
        got = [abs(p.value) for p in pairs]
        np.testing.assert_allclose(got, top, rtol=1e-6)
        for p in pairs:
            resid = np.linalg.norm(a @ p.vector - p.value * p.vector)
            assert resid <= 1e-6 * max(1.0, abs(p.value))

    def test_vectors_orthonormal(self):
        rng = np.random.default_rng(23)
        a, _ = random_symmetric(16, rng)
        pairs = numkit.topk_eigs(numkit.LinearOperator.from_matrix(a), k=6, num_iters=16, seed=3)
        basis = np.stack([p.vector for p in pairs])
        gram = basis @ basis.T
        np.testing.assert_allclose(gram, np.eye(len(pairs)), atol=1e-8)

    def test_seed_invariance_with_gap(self):
        a = np.diag([4.0, 3.0, 2.0, 1.0, 0.5, 0.2])
        op = numkit.LinearOperator.from_matrix(a)
        vals = []
        for seed in (0, 1, 99):
            pairs = numkit.topk_eigs(op, k=3, num_iters=6, seed=seed)
            vals.append([p.value for p in pairs])
        for other in vals[1:]:
            np.testing.assert_allclose(other, vals[0], atol=1e-8)

    def test_breakdown_warns_and_returns_found(self):
        rng = np.random.default_rng(31)
        u = rng.standard_normal((6, 2))
        a = u @ u.T  # rank 2, Krylov space dim <= 3
        op = numkit.LinearOperator.from_matrix(a)
        with pytest.warns(KrylovBreakdownWarning):
            pairs = numkit.topk_eigs(op, k=5, num_iters=6, seed=4)
        assert 1 <= len(pairs) < 5

    def test_deterministic(self):
        rng = np.random.default_rng(37)
        a, _ = random_symmetric(10, rng)
        op = numkit.LinearOperator.from_matrix(a)
        p1 = numkit.topk_eigs(op, k=4, num_iters=10, seed=5)
        p2 = numkit.topk_eigs(op, k=4, num_iters=10, seed=5)
        for x, y in zip(p1, p2):
            assert x.value == y.value
            assert x.vector.tobytes() == y.vector.tobytes()


class TestDenseSymEig:
    def test_diagonal(self):
        pairs = numkit.dense_sym_eig(np.diag([3.0, 1.0]))
        assert [p.value for p in pairs] == [3.0, 1.0]
        np.testing.assert_allclose(np.abs(pairs[0].vector), [1, 0], atol=1e-12)

    def test_swap_matrix(self):
        pairs = numkit.dense_sym_eig(np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(sorted(p.value for p in pairs), [-1.0, 1.0], atol=1e-12)

    def test_reconstruction(self):
        rng = np.random.default_rng(41)
        a, _ = random_symmetric(15, rng)
        pairs = numkit.dense_sym_eig(a)
        recon = sum(p.value * np.outer(p.vector, p.vector) for p in pairs)
        rel = np.linalg.norm(recon - a) / np.linalg.norm(a)
        assert rel <= 1e-9

    def test_dim_guard(self):
        with pytest.raises(DimTooLarge):
            numkit.dense_sym_eig(np.zeros((2001, 2001)))


class TestPearson:
    def test_perfect_positive(self):
        xs = np.array([0.0, 1.0, 4.0, 9.0])
        assert numkit.pearson(xs, 2 * xs + 3) == pytest.approx(1.0, abs=1e-12)

    def test_perfect_negative(self):
        xs = np.array([1.0, 2.0, 5.0])
        assert numkit.pearson(xs, -xs) == pytest.approx(-1.0, abs=1e-12)

    def test_hand_computed_value(self):
        # xs=(1,2,3,4), ys=(1,3,2,5): covariance sum 5.5, sum sq 5 and 8.75
        got = numkit.pearson([1, 2, 3, 4], [1, 3, 2, 5])
        assert got == pytest.approx(5.5 / np.sqrt(5.0 * 8.75), abs=1e-12)

    def test_affine_invariance(self):
        rng = np.random.default_rng(43)
        xs = rng.standard_normal(25)
        for a, expect in ((2.5, 1.0), (-0.3, -1.0)):
            assert numkit.pearson(xs, a * xs + 7.0) == pytest.approx(expect, abs=1e-10)

    def test_degenerate(self):
        with pytest.raises(DegenerateInput):
            numkit.pearson([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])
        with pytest.raises(DegenerateInput):
            numkit.pearson([1.0, 2.0], [3.0, 4.0])

    def test_symmetry(self):
        xs = [1.0, 4.0, 2.0, 8.0]
        ys = [0.5, 0.1, 0.9, 0.3]
        assert numkit.pearson(xs, ys) == pytest.approx(numkit.pearson(ys, xs), abs=1e-15)


class TestLinfit:
    def test_exact_line(self):
        xs = np.array([0.0, 1.0, 2.0, 3.0])
        slope, intercept, r2 = numkit.linfit(xs, 4 * xs - 1)
        assert slope == pytest.approx(4.0, abs=1e-12)
        assert intercept == pytest.approx(-1.0, abs=1e-12)
        assert r2 == pytest.approx(1.0, abs=1e-12)

    def test_constant_ys(self):
        slope, intercept, r2 = numkit.linfit([0.0, 1.0, 2.0], [5.0, 5.0, 5.0])
        assert slope == pytest.approx(0.0, abs=1e-12)
        assert intercept == pytest.approx(5.0, abs=1e-12)
        assert r2 == 0.0

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(47)
        xs = rng.uniform(-2, 2, 30)
        ys = 1.7 * xs - 0.4 + 0.05 * rng.standard_normal(30)
        design = np.stack([xs, np.ones_like(xs)], axis=1)
        coef, *_ = np.linalg.lstsq(design, ys, rcond=None)
        slope, intercept, r2 = numkit.linfit(xs, ys)
        assert slope == pytest.approx(coef[0], abs=1e-10)
        assert intercept == pytest.approx(coef[1], abs=1e-10)
        resid = ys - design @ coef
        expect_r2 = 1.0 - resid @ resid / np.sum((ys - ys.mean()) ** 2)
        assert r2 == pytest.approx(expect_r2, abs=1e-10)

    def test_degenerate_xs(self):
        with pytest.raises(DegenerateInput):
            numkit.linfit([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])


class TestMeanCI:
    def test_all_equal(self):
        mean, lo, hi = numkit.mean_ci([4.0] * 5)
        assert (mean, lo, hi) == (4.0, 4.0, 4.0)

    def test_two_samples_symmetric(self):
        mean, lo, hi = numkit.mean_ci([0.0, 2.0], level=0.95)
        assert mean == pytest.approx(1.0)
        assert hi - mean == pytest.approx(mean - lo, abs=1e-12)
        assert lo < mean < hi

    def test_t_table_nine_samples(self):
        # published two-sided 95% t critical value for 8 d.o.f. is 2.306
        samples = np.array([0.10, 0.12, 0.09, 0.11, 0.10, 0.13, 0.08, 0.10, 0.11])
        mean, lo, hi = numkit.mean_ci(samples, level=0.95)
        half = 2.306 * samples.std(ddof=1) / np.sqrt(9)
        assert mean == pytest.approx(samples.mean(), abs=1e-15)
        assert hi - mean == pytest.approx(half, abs=1e-6)
        assert mean - lo == pytest.approx(half, abs=1e-6)

    def test_degenerate(self):
        with pytest.raises(DegenerateInput):
            numkit.mean_ci([1.0])
        with pytest.raises(DegenerateInput):
            numkit.mean_ci([1.0, 2.0], level=1.5)


class TestOperators:
    def test_from_matrix_rejects_nonsquare(self):
        with pytest.raises(Exception):
            numkit.LinearOperator.from_matrix(np.zeros((2, 3)))

    def test_shifted(self):
        a = np.diag([1.0, 2.0])
        op = numkit.LinearOperator.from_matrix(a).shifted(0.5)
        np.testing.assert_allclose(op.matvec(np.array([1.0, 1.0])), [1.5, 2.5])
