import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scquant.oracle import (
    OracleReport,
    compare_with_solver,
    fd_gradient,
    qp_objective,
    qp_oracle_column,
    simplex_euclidean_project,
)


def random_simplex_point(rng, k):
    w = -np.log(rng.random(k) + 1e-300)
    return w / w.sum()


class TestSimplexProjection:
    def test_point_on_simplex_is_fixed(self):
        v = np.array([0.2, 0.5, 0.3])
        np.testing.assert_allclose(simplex_euclidean_project(v), v, atol=1e-15)

    def test_vertex_overshoot(self):
        np.testing.assert_allclose(simplex_euclidean_project([2.0, 0.0]), [1.0, 0.0], atol=1e-15)

    def test_interior_shift(self):
        np.testing.assert_allclose(
            simplex_euclidean_project([0.7, 0.5]), [0.6, 0.4], atol=1e-15
        )

    def test_single_coordinate(self):
        np.testing.assert_allclose(simplex_euclidean_project([-3.0]), [1.0], atol=0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            simplex_euclidean_project(np.zeros(0))

    @given(st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=50, deadline=None)
    def test_feasibility_and_idempotence(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 20))
        v = rng.normal(scale=3.0, size=k)
        p = simplex_euclidean_project(v)
        assert p.min() >= 0.0
        assert abs(p.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(simplex_euclidean_project(p), p, atol=1e-12)

    @given(st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=30, deadline=None)
    def test_projection_optimality(self, seed):
        # <v - p, q - p> <= 0 for every feasible q characterizes the projection.
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 12))
        v = rng.normal(scale=2.0, size=k)
        p = simplex_euclidean_project(v)
        for _ in range(100):
            q = random_simplex_point(rng, k)
            assert float((v - p) @ (q - p)) <= 1e-10


class TestQpOracle:
    def test_codebook_member_maps_to_vertex(self):
        rng = np.random.default_rng(0)
        codes = rng.normal(size=(3, 5))
        z = codes[:, 2].copy()
        p_tilde = np.zeros(5)
        p_tilde[2] = 1.0
        p = qp_oracle_column(z, codes, 1.0, p_tilde)
        expected = np.zeros(5)
        expected[2] = 1.0
        np.testing.assert_allclose(p, expected, atol=1e-8)

    def test_hand_instance_interior_optimum(self):
        codes = np.array([[0.0, 1.0]])
        p = qp_oracle_column([0.6], codes, 0.1, [0.0, 1.0])
        np.testing.assert_allclose(p, [1.0 / 3.0, 2.0 / 3.0], atol=1e-6)
        analytic = qp_objective([0.6], codes, 0.1, [0.0, 1.0], [1.0 / 3.0, 2.0 / 3.0])
        achieved = qp_objective([0.6], codes, 0.1, [0.0, 1.0], p)
        assert achieved <= analytic + 1e-12

    def test_objective_never_beats_feasible_competitors(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            f, k = int(rng.integers(1, 6)), int(rng.integers(2, 10))
            codes = rng.normal(size=(f, k))
            z = rng.normal(size=f)
            p_tilde = np.zeros(k)
            p_tilde[int(rng.integers(0, k))] = 1.0
            lam = float(rng.choice([0.01, 0.1, 1.0]))
            p = qp_oracle_column(z, codes, lam, p_tilde)
            f_star = qp_objective(z, codes, lam, p_tilde, p)
            for _ in range(25):
                q = random_simplex_point(rng, k)
                assert f_star <= qp_objective(z, codes, lam, p_tilde, q) + 1e-10

    def test_oracle_result_is_feasible(self):
        rng = np.random.default_rng(3)
        codes = rng.normal(size=(4, 8))
        p = qp_oracle_column(rng.normal(size=4), codes, 0.01, np.eye(8)[0])
        assert p.min() >= 0.0
        assert abs(p.sum() - 1.0) <= 1e-9

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            qp_oracle_column([1.0, 2.0], np.ones((3, 4)), 0.1, np.eye(4)[0])

    def test_negative_lam_rejected(self):
        with pytest.raises(ValueError):
            qp_oracle_column([1.0], np.ones((1, 2)), -0.5, [1.0, 0.0])

    def test_compare_with_solver_reports_gap(self):
        codes = np.array([[0.0, 1.0]])
        report = compare_with_solver([0.6], codes, 0.1, [0.0, 1.0], [1.0 / 3.0, 2.0 / 3.0])
        assert isinstance(report, OracleReport)
        # The analytic optimum cannot be worse than the oracle's iterate.
        assert report.objective_gap <= 1e-12
        assert report.objective_gap >= -1e-12
        assert report.argmin_distance <= 1e-6
        assert report.iterations >= 1


class TestFdGradient:
    def test_sum_gives_ones(self):
        g = fd_gradient(lambda x: float(x.sum()), np.zeros((2, 3)))
        np.testing.assert_allclose(g, np.ones((2, 3)), atol=1e-9)

    def test_quadratic_is_exact(self):
        x = np.array([1.0, -2.0, 3.5])
        g = fd_gradient(lambda v: float(0.5 * v @ v), x)
        np.testing.assert_allclose(g, x, atol=1e-8)

    def test_input_left_untouched(self):
        x = np.array([1.0, 2.0])
        fd_gradient(lambda v: float(v @ v), x)
        np.testing.assert_array_equal(x, [1.0, 2.0])

    def test_matches_reverse_mode_on_composite(self):
        from scquant import autodiff as ad

        rng = np.random.default_rng(11)
        a = rng.normal(size=(3, 3))
        w = rng.normal(size=(3, 2))

        def f_np(m):
            return float(np.mean((m @ w) ** 2))

        tape = ad.Tape()
        leaf = tape.leaf(a)
        root = ad.mse(ad.matmul(leaf, tape.leaf(w)), tape.leaf(np.zeros((3, 2))))
        grads = tape.backward(root)
        np.testing.assert_allclose(fd_gradient(f_np, a), grads[leaf], atol=1e-7)
