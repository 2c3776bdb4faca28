import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shotfree import autodiff as ad
from shotfree.autodiff import Tape, Tensor
from shotfree.errors import ContractError, DegenerateInputError, DimensionError, NonFiniteError, OracleError
from shotfree.gradcheck import run_suite

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(v):
    return Tensor(v, requires_grad=True)


def grad_of(f, *params):
    for p in params:
        p.zero_grad()
    with Tape():
        ad.backward(f())
    return [p.grad for p in params]


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.values, [[3.0], [4.0]])

    def test_hand_arithmetic(self):
        assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).values.tolist() == [[11.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_finite_differences(self, rng):
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
        err = ad.finite_diff_check(lambda: ad.sum(ad.matmul(a, b)), [a, b], h=1e-5)
        assert err <= 1e-6

    def test_closed_form_gradients(self, rng):
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
        ga, gb = grad_of(lambda: ad.sum(ad.matmul(a, b)), a, b)
        np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.values.T, rtol=1e-14)
        np.testing.assert_allclose(gb, a.values.T @ np.ones((3, 2)), rtol=1e-14)


class TestRelu:
    def test_values(self):
        assert ad.relu(Tensor([-1.0, 0.0, 2.0])).values.tolist() == [0.0, 0.0, 2.0]

    def test_all_negative(self):
        assert not np.any(ad.relu(Tensor(-np.arange(1.0, 6.0))).values)

    def test_gradient_mask_is_indicator(self, rng):
        x = rng.standard_normal(50)
        x = x[np.abs(x) > 1e-3]
        t = leaf(x)
        (g,) = grad_of(lambda: ad.sum(ad.relu(t)), t)
        np.testing.assert_array_equal(g, (x > 0).astype(float))

    def test_subgradient_at_zero_is_zero(self):
        t = leaf([0.0])
        (g,) = grad_of(lambda: ad.sum(ad.relu(t)), t)
        assert g.tolist() == [0.0]


class TestNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(ad.l2_normalize_rows(Tensor([[3.0, 4.0]])).values, [[0.6, 0.8]], rtol=1e-15)

    def test_unit_rows_unchanged(self):
        u = np.eye(3)
        np.testing.assert_array_equal(ad.l2_normalize_rows(Tensor(u)).values, u)

    def test_zero_row_is_an_error(self):
        with pytest.raises(DegenerateInputError):
            ad.l2_normalize_rows(Tensor([[1.0, 0.0], [0.0, 0.0]]))

    def test_jvp_finite_differences(self, rng):
        x = leaf(rng.standard_normal((4, 5)))
        w = Tensor(rng.standard_normal((4, 5)))
        assert ad.finite_diff_check(lambda: ad.sum(ad.mul(ad.l2_normalize_rows(x), w)), [x], h=1e-5) <= 1e-6

    @given(arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3, allow_nan=False)))
    def test_rows_have_unit_norm(self, x):
        if np.any(np.linalg.norm(x, axis=1) <= 1e-6):
            return
        out = ad.l2_normalize_rows(Tensor(x)).values
        assert np.all(np.abs(np.linalg.norm(out, axis=1) - 1.0) <= 1e-9)


class TestLogSumExp:
    def test_two_zeros(self):
        assert ad.log_sum_exp(Tensor([0.0, 0.0])).item() == pytest.approx(0.6931471805599453, abs=1e-15)

    def test_single_element(self):
        assert ad.log_sum_exp(Tensor([-3.25])).item() == -3.25

    def test_no_overflow(self):
        assert ad.log_sum_exp(Tensor([1000.0, 1000.0])).item() == pytest.approx(1000 + math.log(2), abs=1e-12)

    def test_empty_is_dimension_error(self):
        with pytest.raises(DimensionError):
            ad.log_sum_exp(Tensor(np.zeros(0)))

    def test_reference_value(self):
        # mpmath, 30 digits
        v = ad.log_sum_exp(Tensor([0.5, -1.25, 2.0, 0.0, 3.5])).item()
        assert v == pytest.approx(3.771374555100119, abs=1e-14)

    @given(arrays(np.float64, st.integers(1, 8), elements=finite), finite)
    def test_shift_invariance(self, v, c):
        a = ad.log_sum_exp(Tensor(v + c)).item()
        b = ad.log_sum_exp(Tensor(v)).item() + c
        assert a == pytest.approx(b, abs=1e-12)

    def test_gradient_of_random_lse(self, rng):
        v = leaf(rng.standard_normal(5))
        assert ad.finite_diff_check(lambda: ad.log_sum_exp(v), [v], h=1e-5) <= 1e-7


class TestBackward:
    def test_sum(self):
        x = leaf([1.0, -2.0, 3.0])
        (g,) = grad_of(lambda: ad.sum(x), x)
        assert g.tolist() == [1.0, 1.0, 1.0]

    def test_squared_norm(self, rng):
        x = leaf(rng.standard_normal(4))
        (g,) = grad_of(lambda: ad.sum(ad.square(x)), x)
        np.testing.assert_allclose(g, 2 * x.values, rtol=1e-15)

    def test_accumulates_without_reset(self):
        x = leaf([1.0, 2.0])
        with Tape():
            ad.backward(ad.sum(x))
            ad.backward(ad.sum(ad.scale(x, Tensor(3.0))))
        assert x.grad.tolist() == [4.0, 4.0]

    def test_non_scalar_loss(self):
        x = leaf([1.0, 2.0])
        with Tape(), pytest.raises(ContractError):
            ad.backward(ad.mul(x, x))

    def test_disconnected_loss(self):
        with pytest.raises(ContractError):
            ad.backward(ad.sum(Tensor([1.0])))

    def test_two_layer_mlp(self, rng):
        w1, b1 = leaf(rng.standard_normal((3, 5))), leaf(rng.standard_normal(5))
        w2 = leaf(rng.standard_normal((5, 1)))
        x = Tensor(rng.standard_normal((6, 3)))
        f = lambda: ad.sum(ad.square(ad.matmul(ad.relu(ad.add(ad.matmul(x, w1), b1)), w2)))  # noqa: E731
        assert ad.finite_diff_check(f, [w1, b1, w2], h=1e-5) <= 1e-4

    def test_shared_subexpression(self):
        # y = x * x used twice: d/dx sum(y + y) = 4x
        x = leaf([1.5, -2.0])

        def f():
            y = ad.mul(x, x)
            return ad.sum(ad.add(y, y))

        (g,) = grad_of(f, x)
        np.testing.assert_allclose(g, 4 * x.values)

    def test_grad_shape_matches_values(self, rng):
        x = leaf(rng.standard_normal((2, 3)))
        (g,) = grad_of(lambda: ad.mean(ad.exp(x)), x)
        assert g.shape == x.shape

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with Tape() as tape, ad.no_grad():
            y = ad.exp(x)
        assert len(tape) == 0 and not y.requires_grad

    def test_clear_empties_tape(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            ad.sum(ad.exp(x))
            assert len(tape) == 2
            tape.clear()
            assert len(tape) == 0

    def test_replay_is_bitwise_deterministic(self):
        def grads():
            r = np.random.default_rng(7)
            w = leaf(r.standard_normal((4, 3)))
            x = Tensor(r.standard_normal((5, 4)))
            (g,) = grad_of(lambda: ad.log_sum_exp(ad.pick(ad.log_softmax_rows(ad.matmul(x, w)), np.arange(5) % 3)), w)
            return g

        assert np.array_equal(grads(), grads())


class TestFinite:
    def test_overflow_raises(self):
        with pytest.raises(NonFiniteError):
            ad.exp(Tensor([1000.0]))

    def test_log_of_zero_is_rejected(self):
        with pytest.raises(ContractError):
            ad.log(Tensor([0.0]))


class TestFiniteDiffCheck:
    def test_square(self):
        x = leaf(3.0)
        assert ad.finite_diff_check(lambda: ad.square(x), [x], h=1e-5) <= 1e-8

    def test_bad_step(self):
        x = leaf(1.0)
        with pytest.raises(ContractError):
            ad.finite_diff_check(lambda: ad.square(x), [x], h=0.0)

    def test_nondeterministic_f(self):
        x = leaf([1.0])
        r = np.random.default_rng(0)
        with pytest.raises(OracleError):
            ad.finite_diff_check(lambda: ad.sum(ad.scale(x, Tensor(r.standard_normal()))), [x])

    def test_detects_wrong_gradient(self):
        x = leaf([0.3, 0.7])

        def wrong():
            # a primitive whose vjp is off by a factor of two
            return ad.sum(ad._emit("bad_square", x.values ** 2, [x], lambda g: [g * x.values]))

        assert ad.finite_diff_check(wrong, [x], h=1e-5) > 0.1


@pytest.mark.parametrize("seed", range(100))
def test_every_primitive_over_100_seeds(seed):
    res = run_suite(seed=seed, h=1e-5)
    assert res.passed, [(c.name, c.max_rel_error) for c in res.cases if not c.passed]
