import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cignn import autodiff as ad
from cignn.autodiff import Tensor
from cignn.errors import ContractError, DimensionError, NumericError

from oracles import central_difference, matmul_loop


def leaf(a):
    return Tensor(a, requires_grad=True)


def numeric_grad(build, arrays_in, k, step=1e-5):
    """Central-difference gradient of ``build(*tensors)`` w.r.t. input ``k``."""
    base = [np.array(a, dtype=float) for a in arrays_in]

    def f(xk):
        args = [Tensor(a) for a in base]
        args[k] = Tensor(xk)
        return float(build(*args).data)

    out = np.zeros_like(base[k])
    for idx in np.ndindex(base[k].shape):
        out[idx] = central_difference(f, base[k], idx, step)
    return out


def assert_grads_match(build, arrays_in, rtol=1e-4, atol=1e-7):
    tensors = [leaf(a) for a in arrays_in]
    grads = ad.backward(build(*tensors))
    for k, t in enumerate(tensors):
        np.testing.assert_allclose(grads[t], numeric_grad(build, arrays_in, k), rtol=rtol, atol=atol)


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projection(self):
        out = ad.matmul(Tensor([[1, 0], [0, 0]]), Tensor([[5], [7]]))
        np.testing.assert_array_equal(out.data, [[5], [0]])

    def test_matches_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, matmul_loop(a, b), atol=1e-14)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert ad.elementwise("sigmoid", Tensor(0.0)).data == 0.5

    def test_tanh_zero(self):
        assert ad.elementwise("tanh", Tensor(0.0)).data == 0.0

    def test_mul(self):
        out = ad.elementwise("mul", Tensor([1, 2, 3]), Tensor([4, 5, 6]))
        np.testing.assert_array_equal(out.data, [4, 10, 18])

    def test_binary_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.elementwise("add", Tensor([1, 2]), Tensor([1, 2, 3]))

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            ad.elementwise("cube", Tensor([1.0]))

    def test_sigmoid_stable_for_large_inputs(self):
        out = ad.sigmoid(Tensor([-800.0, -40.0, 40.0, 800.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[-1] == 1.0
        np.testing.assert_allclose(out[1], np.exp(-40.0), rtol=1e-12)


class TestConcat:
    def test_channel_lift_shape(self):
        out = ad.concat(0, [Tensor(np.zeros((1, 3, 2))), Tensor(np.ones((5, 3, 2)))])
        assert out.shape == (6, 3, 2)

    def test_single_tensor_is_identity(self):
        t = leaf(np.ones(3))
        assert ad.concat(0, [t]) is t

    def test_incompatible(self):
        with pytest.raises(DimensionError):
            ad.concat(0, [Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 4)))])

    def test_gradient_is_slice_of_upstream(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(1, 3)), rng.normal(size=(2, 3))
        w = rng.normal(size=(3, 3))
        assert_grads_match(lambda x, y: ad.total(ad.concat(0, [x, y]) * Tensor(w)), [a, b])
        ta, tb = leaf(a), leaf(b)
        g = ad.backward(ad.total(ad.concat(0, [ta, tb]) * Tensor(w)))
        np.testing.assert_array_equal(g[ta], w[:1])
        np.testing.assert_array_equal(g[tb], w[1:])


class TestBackward:
    def test_sum_gives_ones(self):
        p = leaf(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(ad.backward(ad.total(p))[p], np.ones((2, 3)))

    def test_half_square_gives_identity(self):
        x = np.random.default_rng(2).normal(size=(4, 2))
        p = leaf(x)
        np.testing.assert_allclose(ad.backward(ad.scale(ad.total(p * p), 0.5))[p], x)

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            ad.backward(leaf(np.ones(2)))

    def test_reuse_accumulates(self):
        p = leaf(np.array([1.0, -2.0]))
        loss = ad.total(p * p + p + p)
        np.testing.assert_allclose(ad.backward(loss)[p], 2 * p.data + 2)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        p = leaf(rng.normal(size=(3,)))
        f1 = lambda: ad.total(ad.tanh(p))  # noqa: E731
        f2 = lambda: ad.total(ad.sigmoid(p) * p)  # noqa: E731
        g_sum = ad.backward(f1() + f2())[p]
        np.testing.assert_allclose(g_sum, ad.backward(f1())[p] + ad.backward(f2())[p], atol=1e-15)

    def test_constants_receive_no_gradient(self):
        p, c = leaf(np.ones(2)), Tensor(np.ones(2))
        grads = ad.backward(ad.total(p * c))
        assert c not in grads and p in grads

    def test_unreached_leaf_gets_zeros(self):
        a, b = leaf(np.ones(2)), leaf(np.ones(3))
        grads = ad.backward(ad.total(a) + ad.scale(ad.total(b), 0.0))
        np.testing.assert_array_equal(grads[b], np.zeros(3))


class TestNumericGuards:
    def test_nan_input_rejected(self):
        with pytest.raises(NumericError):
            Tensor([1.0, np.nan])

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_overflow_rejected(self):
        big = Tensor([1e200])
        with pytest.raises(NumericError):
            big * big

    def test_tensors_are_immutable(self):
        t = Tensor(np.zeros(3))
        with pytest.raises(ValueError):
            t.data[0] = 1.0


class TestEinsum:
    def test_requires_explicit_output(self):
        with pytest.raises(ContractError):
            ad.einsum("ij,jk", Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))

    def test_rank_mismatch(self):
        with pytest.raises(DimensionError):
            ad.einsum("ij,jk->ik", Tensor(np.ones(2)), Tensor(np.ones((2, 2))))

    def test_matches_numpy(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 3))
        out = ad.einsum("bcn,nc->bn", Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, np.einsum("bcn,nc->bn", a, b), atol=1e-13)


RNG = np.random.default_rng(5)
OP_CASES = {
    "add": (lambda a, b: ad.total((a + b) * (a + b)), [RNG.normal(size=(2, 3)), RNG.normal(size=(2, 3))]),
    "sub": (lambda a, b: ad.total((a - b) * a), [RNG.normal(size=(3,)), RNG.normal(size=(3,))]),
    "mul": (lambda a, b: ad.total(a * b * a), [RNG.normal(size=(2, 2)), RNG.normal(size=(2, 2))]),
    "matmul": (lambda a, b: ad.total(ad.tanh(ad.matmul(a, b))), [RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))]),
    "sigmoid": (lambda a: ad.total(ad.sigmoid(a) * a), [RNG.normal(size=(4,))]),
    "tanh": (lambda a: ad.total(ad.tanh(a) * a), [RNG.normal(size=(4,))]),
    "abs": (lambda a: ad.total(ad.absolute(a)), [np.array([0.5, -1.2, 2.0])]),
    "scale_shift": (lambda a: ad.total(ad.add_scalar(ad.scale(a, 3.0), 1.0) * a), [RNG.normal(size=(3,))]),
    "rsub": (lambda a: ad.total((1.0 - a) * a), [RNG.normal(size=(3,))]),
    "einsum": (
        lambda a, b: ad.total(ad.tanh(ad.einsum("bcn,cd->bdn", a, b))),
        [RNG.normal(size=(2, 3, 2)), RNG.normal(size=(3, 4))],
    ),
    "einsum_outer": (
        lambda a, b: ad.total(ad.sigmoid(ad.einsum("mq,c->cmq", a, b))),
        [RNG.normal(size=(2, 3)), RNG.normal(size=(4,))],
    ),
    "reshape": (lambda a: ad.total(ad.reshape(a, (6,)) * Tensor(np.arange(6.0))), [RNG.normal(size=(2, 3))]),
    "broadcast": (
        lambda a: ad.total(ad.tanh(ad.broadcast_to(ad.reshape(a, (1, 3, 1)), (2, 3, 4)))),
        [RNG.normal(size=(3,))],
    ),
    "mean": (lambda a: ad.mean(a * a), [RNG.normal(size=(2, 5))]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(name):
    build, inputs = OP_CASES[name]
    assert_grads_match(build, inputs)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3)),
           elements=st.floats(-3, 3, allow_nan=False, allow_infinity=False)),
    arrays(np.float64, 3, elements=st.floats(-3, 3, allow_nan=False, allow_infinity=False)),
)
def test_random_composite_gradient(x, w):
    n = x.shape[1]
    wm = np.resize(w, (n, 2))

    def build(a, b):
        return ad.total(ad.sigmoid(ad.matmul(a, b)) * ad.tanh(ad.matmul(a, b)))

    assert_grads_match(build, [x, wm], rtol=1e-4, atol=1e-6)


def test_forward_is_bit_identical():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    r1 = ad.tanh(ad.matmul(Tensor(a), Tensor(b))).data
    r2 = ad.tanh(ad.matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()
