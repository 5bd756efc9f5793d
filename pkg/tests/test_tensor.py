import numpy as np
import pytest

from latent_router import tensor as T
from latent_router.tensor import (
    Tape,
    Tensor,
    backward,
    grad_check,
)


def matmul_reference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Brute-force triple loop, the independent oracle for matmul."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), a)
        assert np.array_equal(out.data, a.data)

    def test_1x1(self):
        out = T.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
        assert out.data[0, 0] == 6.0

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        out = T.matmul(Tensor(a), Tensor(b))
        assert np.max(np.abs(out.data - matmul_reference(a, b))) < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(T.DimensionError) as ei:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(ei.value)

    def test_backward_rules(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.matmul(a, b))
            backward(tape, loss)
        g = np.ones((3, 2))
        assert np.allclose(a.grad, g @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ g)


class TestMaskedSoftmax:
    def test_uniform(self):
        out = T.masked_softmax(Tensor([0.0, 0.0, 0.0]), [True, True, True])
        assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_single_support(self):
        out = T.masked_softmax(Tensor([5.0, -5.0]), [True, False])
        assert out.data[0] == 1.0
        assert out.data[1] == 0.0

    def test_reference_values(self):
        out = T.masked_softmax(Tensor([1.0, 2.0, 3.0]), [True] * 3)
        expected = [0.09003057, 0.24472847, 0.66524096]
        assert np.max(np.abs(out.data - expected)) < 1e-8

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = rng.integers(2, 9)
            mask = rng.random(n) < 0.7
            if not mask.any():
                mask[0] = True
            out = T.masked_softmax(Tensor(rng.standard_normal(n) * 5), mask)
            assert abs(out.data[mask].sum() - 1.0) < 1e-12
            assert np.all(out.data[~mask] == 0.0)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(6)
        mask = np.array([True, True, False, True, True, False])
        a = T.masked_softmax(Tensor(x), mask).data
        b = T.masked_softmax(Tensor(x + 17.5 * mask), mask).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_empty_support(self):
        with pytest.raises(T.EmptySupportError):
            T.masked_softmax(Tensor([1.0, 2.0]), [False, False])

    def test_rowwise(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 5))
        mask = np.array([True, False, True, True, False])
        out = T.masked_softmax(Tensor(x), mask)
        for r in range(4):
            row = T.masked_softmax(Tensor(x[r]), mask)
            assert np.allclose(out.data[r], row.data, atol=1e-15)


class TestElementwise:
    def test_tanh_zero(self):
        assert T.tanh(Tensor([0.0])).data[0] == 0.0

    def test_softplus_zero_is_log2(self):
        assert abs(T.softplus(Tensor([0.0])).data[0] - 0.6931471805599453) < 1e-12

    def test_softplus_stable_branch(self):
        assert abs(T.softplus(Tensor([50.0])).data[0] - 50.0) < 1e-12

    def test_softplus_continuity_at_branch(self):
        lo = T.softplus(Tensor([20.0 - 1e-9])).data[0]
        hi = T.softplus(Tensor([20.0 + 1e-9])).data[0]
        assert abs(hi - lo) < 1e-8

    def test_log_domain(self):
        with pytest.raises(T.NumericError):
            T.log(Tensor([1.0, 0.0]))

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_scalar_broadcast(self):
        out = T.mul(Tensor([1.0, 2.0, 3.0]), 2.0)
        assert np.array_equal(out.data, [2.0, 4.0, 6.0])

    def test_concat_backward(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.mul(T.concat([a, b]), Tensor([1.0, 2.0, 3.0, 4.0, 5.0])))
            backward(tape, loss)
        assert np.array_equal(a.grad, [1.0, 2.0])
        assert np.array_equal(b.grad, [3.0, 4.0, 5.0])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            backward(tape, T.sum_all(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_square_at_3(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            backward(tape, T.sum_all(T.square(x)))
        assert x.grad[0] == 6.0

    def test_fanout_accumulates(self):
        k = 4
        x = Tensor([1.5], requires_grad=True)
        with Tape() as tape:
            acc = T.mul(x, 2.0)
            for _ in range(k - 1):
                acc = T.add(acc, T.mul(x, 2.0))
            backward(tape, T.sum_all(acc))
        assert x.grad[0] == pytest.approx(2.0 * k)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, 2.0)
            with pytest.raises(T.ContractError):
                backward(tape, y)

    def test_grad_accumulates_across_tapes(self):
        x = Tensor([2.0], requires_grad=True)
        for _ in range(3):
            with Tape() as tape:
                backward(tape, T.sum_all(T.square(x)))
        assert x.grad[0] == pytest.approx(12.0)


class TestGradCheck:
    def test_quadratic(self):
        err = grad_check(lambda x: T.sum_all(T.mul(x, x)), Tensor([2.0]), step=1e-5)
        assert err < 1e-8

    def test_masked_softmax_then_sum(self):
        mask = np.array([True, True, False, True])
        w = Tensor([0.3, -1.2, 0.0, 2.0])

        def f(x):
            return T.sum_all(T.mul(T.masked_softmax(x, mask), w))

        err = grad_check(f, Tensor([0.1, 0.5, -0.3, 0.8]), step=1e-5)
        assert err < 1e-6

    def test_rejects_bad_step(self):
        with pytest.raises(T.ContractError):
            grad_check(lambda x: T.sum_all(x), Tensor([1.0]), step=0.0)

    @pytest.mark.parametrize(
        "name,f",
        [
            ("tanh", lambda x: T.sum_all(T.tanh(x))),
            ("softplus", lambda x: T.sum_all(T.softplus(x))),
            ("square", lambda x: T.sum_all(T.square(x))),
            ("log", lambda x: T.sum_all(T.log(T.add(T.square(x), 0.5)))),
            ("layer_norm", lambda x: T.sum_all(T.square(T.layer_norm(x)))),
            ("mean_rows", lambda x: T.sum_all(T.square(T.mean_rows(x)))),
            ("div", lambda x: T.sum_all(T.div(x, T.add(T.square(x), 1.0)))),
            ("gather", lambda x: T.sum_all(T.square(T.gather(x, [0, 1, 1, 2])))),
            ("column", lambda x: T.sum_all(T.square(T.column(x, 1)))),
            ("add_rowvec", lambda x: T.sum_all(T.square(T.add_rowvec(x, np.array([0.3, -0.2, 0.9]))))),
            (
                "affine",
                lambda x: T.sum_all(
                    T.square(T.affine(x, np.eye(3) * 0.7, np.array([0.3, -0.2, 0.9])))
                ),
            ),
            ("transpose", lambda x: T.sum_all(T.square(T.matmul(T.transpose(x), x)))),
        ],
    )
    def test_ops_match_finite_differences(self, name, f):
        rng = np.random.default_rng(hash(name) % 2**32)
        worst = 0.0
        for _ in range(10):
            x = Tensor(rng.standard_normal((3, 3)))
            if name in ("gather",):
                x = Tensor(rng.standard_normal((4, 3)))
            worst = max(worst, grad_check(f, x, step=1e-5))
        assert worst < 1e-4


class TestDeterminism:
    def test_forward_bit_identical(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        r1 = T.matmul(Tensor(a), Tensor(b)).data
        r2 = T.matmul(Tensor(a.copy()), Tensor(b.copy())).data
        assert np.array_equal(r1, r2)
        s1 = T.masked_softmax(Tensor(a[0]), np.ones(7, bool)).data
        s2 = T.masked_softmax(Tensor(a[0].copy()), np.ones(7, bool)).data
        assert np.array_equal(s1, s2)

    def test_all_finite_after_ops(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.standard_normal((4, 4)) * 10)
        for out in (T.tanh(x), T.softplus(x), T.square(x), T.layer_norm(x)):
            assert np.all(np.isfinite(out.data))
