import numpy as np
import pytest

from scquant import autodiff as ad
from scquant.errors import NotPositiveDefiniteError, ShapeMismatchError


def scalar(tape, x):
    return tape.leaf(np.asarray(float(x)))


class TestTapeMechanics:
    def test_leaf_then_backward_is_identity_gradient(self):
        tape = ad.Tape()
        x = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
        y = ad.sum_all(x)
        grads = tape.backward(y)
        np.testing.assert_array_equal(grads[x], np.ones((2, 2)))

    def test_non_scalar_root_rejected(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones((2, 2)))
        with pytest.raises(ShapeMismatchError):
            tape.backward(x)

    def test_foreign_parent_rejected(self):
        t1, t2 = ad.Tape(), ad.Tape()
        x = t1.leaf(np.ones(3))
        with pytest.raises(ValueError):
            t2.record("bad", np.ones(3), [(x, lambda u: u)])

    def test_unreached_node_reads_as_zero(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones(3))
        z = tape.leaf(np.ones(3))
        grads = tape.backward(ad.sum_all(x))
        np.testing.assert_array_equal(grads[z], np.zeros(3))
        assert z not in grads
        assert x in grads

    def test_repeated_backward_is_bitwise_identical(self):
        rng = np.random.default_rng(3)
        tape = ad.Tape()
        x = tape.leaf(rng.normal(size=(4, 4)))
        # Diamond-shaped graph: two children of x feed the same sum.
        a = ad.mul(x, x)
        b = ad.scale(x, 2.0)
        y = ad.sum_all(ad.add(a, b))
        g1 = tape.backward(y)[x]
        g2 = tape.backward(y)[x]
        np.testing.assert_array_equal(g1, g2)
        np.testing.assert_allclose(g1, 2.0 * x.value + 2.0, atol=1e-15)

    def test_fanout_accumulates(self):
        tape = ad.Tape()
        x = tape.leaf([2.0])
        y = ad.sum_all(ad.add(x, x))
        assert tape.backward(y)[x] == pytest.approx([2.0])

    def test_operator_sugar_matches_functions(self):
        tape = ad.Tape()
        x = tape.leaf([1.0, -2.0])
        y = ad.sum_all((x * 3.0 + 1.0) - x * x)
        grads = tape.backward(y)
        np.testing.assert_allclose(grads[x], 3.0 - 2.0 * x.value, atol=1e-15)


class TestPrimitiveGradients:
    """Hand-checkable gradients plus finite-difference sweeps per primitive."""

    def test_mse_hand_gradient(self):
        tape = ad.Tape()
        a = tape.leaf([1.0, 2.0])
        b = tape.leaf([0.0, 0.0])
        loss = ad.mse(a, b)
        assert float(loss.value) == pytest.approx(2.5)
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads[a], [1.0, 2.0], atol=1e-15)
        np.testing.assert_allclose(grads[b], [-1.0, -2.0], atol=1e-15)

    def test_mse_shape_mismatch(self):
        tape = ad.Tape()
        with pytest.raises(ShapeMismatchError):
            ad.mse(tape.leaf(np.ones(3)), tape.leaf(np.ones(4)))

    def test_broadcast_add_sums_gradient(self):
        tape = ad.Tape()
        a = tape.leaf(np.zeros((3, 4)))
        row = tape.leaf(np.zeros((1, 4)))
        y = ad.sum_all(ad.add(a, row))
        grads = tape.backward(y)
        np.testing.assert_array_equal(grads[row], 3.0 * np.ones((1, 4)))

    def test_matmul_fd(self):
        rng = np.random.default_rng(0)
        err = ad.grad_check(
            lambda tape, leaves: ad.mse(ad.matmul(leaves[0], leaves[1]), leaves[2]),
            [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))],
        )
        assert err <= 1e-6

    def test_mul_sub_scale_fd(self):
        rng = np.random.default_rng(1)
        err = ad.grad_check(
            lambda tape, leaves: ad.sum_all(
                ad.sub(ad.mul(leaves[0], leaves[1]), ad.scale(leaves[0], 0.7))
            ),
            [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))],
        )
        assert err <= 1e-6

    def test_transpose_reshape_fd(self):
        rng = np.random.default_rng(2)
        err = ad.grad_check(
            lambda tape, leaves: ad.mse(
                ad.reshape(ad.transpose(leaves[0], (1, 0, 2)), (6, 2)),
                leaves[1],
            ),
            [rng.normal(size=(3, 2, 2)), rng.normal(size=(6, 2))],
        )
        assert err <= 1e-6

    def test_softmax_columns_sum_to_one_and_fd(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(5, 4))
        tape = ad.Tape()
        w = ad.softmax_cols(tape.leaf(logits))
        np.testing.assert_allclose(w.value.sum(axis=0), np.ones(4), atol=1e-12)
        target = rng.normal(size=(5, 4))
        err = ad.grad_check(
            lambda tape, leaves: ad.mse(ad.softmax_cols(leaves[0]), leaves[1]),
            [logits, target],
        )
        assert err <= 1e-6

    def test_softmax_shift_invariance(self):
        logits = np.random.default_rng(4).normal(size=(6, 3))
        t1, t2 = ad.Tape(), ad.Tape()
        w1 = ad.softmax_cols(t1.leaf(logits))
        w2 = ad.softmax_cols(t2.leaf(logits + 100.0))
        np.testing.assert_allclose(w1.value, w2.value, atol=1e-12)

    def test_clamp_min_fd_away_from_kink(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 4))
        x[np.abs(x) < 0.1] += 0.2  # keep every entry off the kink
        err = ad.grad_check(
            lambda tape, leaves: ad.sum_all(ad.clamp_min(leaves[0], 0.0)), [x]
        )
        assert err <= 1e-6

    def test_clamp_min_subgradient_at_kink_is_zero(self):
        tape = ad.Tape()
        x = tape.leaf([0.0, -1.0, 1.0])
        y = ad.sum_all(ad.clamp_min(x, 0.0))
        np.testing.assert_array_equal(tape.backward(y)[x], [0.0, 0.0, 1.0])

    def test_sum_axis_keepdims_fd(self):
        rng = np.random.default_rng(6)
        for keepdims in (False, True):
            err = ad.grad_check(
                lambda tape, leaves: ad.sum_all(
                    ad.mul(
                        ad.sum_axis(leaves[0], 0, keepdims=keepdims),
                        ad.sum_axis(leaves[0], 0, keepdims=keepdims),
                    )
                ),
                [rng.normal(size=(3, 5))],
            )
            assert err <= 1e-6

    def test_gather_columns_accumulates_duplicates(self):
        tape = ad.Tape()
        c = tape.leaf(np.array([[1.0, 2.0, 3.0]]))
        picked = ad.gather_columns(c, np.array([2, 2, 0]))
        np.testing.assert_array_equal(picked.value, [[3.0, 3.0, 1.0]])
        grads = tape.backward(ad.sum_all(picked))
        np.testing.assert_array_equal(grads[c], [[1.0, 0.0, 2.0]])

    def test_gather_columns_fd(self):
        rng = np.random.default_rng(7)
        idx = np.array([0, 3, 3, 1])
        err = ad.grad_check(
            lambda tape, leaves: ad.mse(
                ad.gather_columns(leaves[0], idx), leaves[1]
            ),
            [rng.normal(size=(2, 5)), rng.normal(size=(2, 4))],
        )
        assert err <= 1e-6

    def test_gather_columns_bad_index(self):
        tape = ad.Tape()
        c = tape.leaf(np.ones((2, 3)))
        with pytest.raises(IndexError):
            ad.gather_columns(c, np.array([0, 5]))


class TestStopGradients:
    def test_detach_blocks_flow(self):
        tape = ad.Tape()
        x = tape.leaf([3.0])
        y = ad.sum_all(ad.mul(ad.detach(x), x))
        grads = tape.backward(y)
        np.testing.assert_allclose(grads[x], [3.0])  # only the live factor

    def test_ste_forwards_value_and_reroutes_gradient(self):
        tape = ad.Tape()
        z = tape.leaf([1.0, 2.0])
        q = tape.leaf([10.0, 20.0])
        out = ad.ste(z, q)
        np.testing.assert_array_equal(out.value, [10.0, 20.0])
        grads = tape.backward(ad.mse(out, tape.leaf([0.0, 0.0])))
        np.testing.assert_allclose(grads[z], [10.0, 20.0])  # identity pass-through
        np.testing.assert_array_equal(grads[q], [0.0, 0.0])

    def test_ste_shape_mismatch(self):
        tape = ad.Tape()
        with pytest.raises(ShapeMismatchError):
            ad.ste(tape.leaf(np.ones(2)), tape.leaf(np.ones(3)))


class TestSolveSpd:
    def test_value_matches_direct_solve(self):
        rng = np.random.default_rng(8)
        g = rng.normal(size=(5, 5))
        a = g @ g.T + 5 * np.eye(5)
        b = rng.normal(size=(5, 3))
        tape = ad.Tape()
        x = ad.solve_spd(tape.leaf(a), tape.leaf(b))
        np.testing.assert_allclose(a @ x.value, b, atol=1e-10)

    def test_vjp_scalar_hand_case(self):
        grad_a, grad_b = ad.solve_spd_vjp([[2.0]], [[6.0]], [[3.0]], [[1.0]])
        np.testing.assert_allclose(grad_b, [[0.5]], atol=1e-15)
        np.testing.assert_allclose(grad_a, [[-1.5]], atol=1e-15)

    def test_vjp_shape_guard(self):
        with pytest.raises(ShapeMismatchError):
            ad.solve_spd_vjp(np.eye(2), np.ones((2, 1)), np.ones((2, 1)), np.ones((3, 1)))

    def test_fd_through_symmetrized_solve(self):
        rng = np.random.default_rng(9)
        g = rng.normal(size=(4, 4))
        a = g @ g.T + 4 * np.eye(4)
        b = rng.normal(size=(4, 2))
        target = rng.normal(size=(4, 2))

        def fn(tape, leaves):
            a_sym = ad.scale(ad.add(leaves[0], ad.transpose(leaves[0])), 0.5)
            return ad.mse(ad.solve_spd(a_sym, leaves[1]), leaves[2])

        assert ad.grad_check(fn, [a, b, target]) <= 1e-6

    def test_not_spd_raises(self):
        tape = ad.Tape()
        with pytest.raises(NotPositiveDefiniteError):
            ad.solve_spd(tape.leaf([[0.0, 0.0], [0.0, 1.0]]), tape.leaf([[1.0], [1.0]]))


class TestGradCheck:
    def test_flags_a_corrupted_vjp(self):
        def broken(tape, leaves):
            x = leaves[0]
            # Correct value, deliberately scaled vjp.
            y = tape.record("broken_square", x.value * x.value, [(x, lambda u: 1.01 * u * 2.0 * x.value)])
            return ad.sum_all(y)

        err = ad.grad_check(broken, [np.array([1.0, 2.0, 3.0])])
        assert err > 1e-3

    def test_quadratic_is_exactly_consistent(self):
        err = ad.grad_check(
            lambda tape, leaves: ad.sum_all(ad.mul(leaves[0], leaves[0])),
            [np.array([0.5, -1.5, 2.0])],
        )
        assert err <= 1e-9
