import numpy as np
import pytest

from gppvae import tensor as T

SHAPES = [(3,), (2, 4), (3, 2, 2)]


def leaf(rng, shape, low=-1.0, high=1.0):
    return T.Tensor(rng.uniform(low, high, shape), requires_grad=True)


def weighted(out, seed):
    # a fixed random linear functional makes every output entry matter
    w = T.Tensor(np.random.default_rng(seed).normal(size=out.shape))
    return T.tsum(T.mul(out, w))


UNARY = {
    "exp": (T.exp, -1, 1),
    "log": (T.log, 0.5, 2.0),
    "sin": (T.sin, -2, 2),
    "cos": (T.cos, -2, 2),
    "sigmoid": (T.sigmoid, -3, 3),
    "softplus": (T.softplus, -3, 3),
    "relu": (T.relu, 0.1, 1),          # away from the kink
    "neg": (T.neg, -1, 1),
    "square": (T.square, -1, 1),
    "power3": (lambda a: T.power(a, 3.0), -1, 1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("shape", SHAPES)
def test_unary_grad(name, shape, rng):
    fn, lo, hi = UNARY[name]
    x = leaf(rng, shape, lo, hi)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0) if name == "relu" else 1.0
    x.data *= sign
    assert T.grad_check(lambda: weighted(fn(x), 0), [x]) <= 1e-4


BINARY = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("shapes", [((3,), (3,)), ((2, 4), (4,)), ((3, 2, 2), (1, 2, 1))])
def test_binary_grad_with_broadcast(name, shapes, rng):
    a = leaf(rng, shapes[0], 0.5, 1.5)
    b = leaf(rng, shapes[1], 0.5, 1.5)
    assert T.grad_check(lambda: weighted(BINARY[name](a, b), 1), [a, b]) <= 1e-4


@pytest.mark.parametrize("shape", SHAPES)
def test_scalar_operands(shape, rng):
    x = leaf(rng, shape, 0.5, 1.5)
    f = lambda: T.tsum(T.div(T.add(T.mul(x, 3.0), 1.0), 2.0) - 0.5 + 2.0 / x)  # noqa: E731
    assert T.grad_check(f, [x]) <= 1e-4


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("axis", [None, 0, -1])
def test_reductions(shape, axis, rng):
    x = leaf(rng, shape)
    r = 2
    assert T.grad_check(lambda: weighted(T.tsum(x, axis=axis), r), [x]) <= 1e-4
    assert T.grad_check(lambda: weighted(T.mean(x, axis=axis, keepdims=True), r), [x]) <= 1e-4


@pytest.mark.parametrize("shape", [(2, 3), (4, 1), (3, 2, 2)])
def test_shape_ops(shape, rng):
    x = leaf(rng, shape)
    r = 3
    n = int(np.prod(shape))
    assert T.grad_check(lambda: weighted(T.transpose(x), r), [x]) <= 1e-4
    assert T.grad_check(lambda: weighted(T.reshape(x, (n,)), r), [x]) <= 1e-4
    assert T.grad_check(lambda: weighted(T.broadcast_to(x, (2,) + shape), r), [x]) <= 1e-4
    assert T.grad_check(lambda: weighted(T.concat([x, x], axis=0), r), [x]) <= 1e-4


@pytest.mark.parametrize("shape", [(4, 3), (5, 2), (3, 2, 2)])
def test_take_rows_with_repeats(shape, rng):
    x = leaf(rng, shape)
    idx = np.array([0, 2, 2, 1])
    out = T.take_rows(x, idx)
    np.testing.assert_array_equal(out.data, x.data[idx])
    assert T.grad_check(lambda: weighted(T.take_rows(x, idx), 4), [x]) <= 1e-4


def test_take_slice_columns(rng):
    x = leaf(rng, (3, 6))
    assert T.grad_check(lambda: weighted(T.take(x, slice(1, 4), axis=1), 5), [x]) <= 1e-4


# matmul --------------------------------------------------------------------


def test_matmul_examples():
    a = T.Tensor(np.eye(2))
    b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(T.Tensor([[1.0, 0.0]]), T.Tensor([[0.0], [5.0]])).data, [[0.0]])


def test_matmul_matches_triple_loop(rng):
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += A[i, k] * B[k, j]
    np.testing.assert_allclose(T.matmul(T.Tensor(A), T.Tensor(B)).data, ref, rtol=1e-14)


@pytest.mark.parametrize("m,k,n", [(3, 4, 2), (1, 5, 1), (6, 2, 3)])
def test_matmul_and_dense_grad(m, k, n, rng):
    a, b, bias = leaf(rng, (m, k)), leaf(rng, (k, n)), leaf(rng, (n,))
    assert T.grad_check(lambda: weighted(T.matmul(a, b), 6), [a, b]) <= 1e-4
    assert T.grad_check(lambda: weighted(T.dense(a, b, bias), 7), [a, b, bias]) <= 1e-4


def test_matmul_shape_error_is_descriptive():
    with pytest.raises(ValueError, match=r"\(2, 3\) @ \(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


# convolutions ----------------------------------------------------------------

CONV_CASES = [((2, 1, 6, 6), (3, 1, 3, 3)), ((1, 2, 7, 7), (2, 2, 3, 3)), ((2, 3, 5, 4), (4, 3, 3, 3))]


def conv_oracle(x, w, stride=2, pad=1):
    b, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((b, co, ho, wo))
    for n in range(b):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    out[n, o, i, j] = np.sum(xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw] * w[o])
    return out


@pytest.mark.parametrize("xs,ws", CONV_CASES)
def test_conv2d_forward_and_grad(xs, ws, rng):
    x, w, b = leaf(rng, xs), leaf(rng, ws), leaf(rng, (ws[0],))
    out = T.conv2d(x, w, b)
    np.testing.assert_allclose(out.data, conv_oracle(x.data, w.data) + b.data.reshape(1, -1, 1, 1), atol=1e-12)
    assert T.grad_check(lambda: weighted(T.conv2d(x, w, b), 8), [x, w, b]) <= 1e-4


@pytest.mark.parametrize("xs,cout,op", [((2, 3, 3, 3), 1, 1), ((1, 2, 4, 4), 2, 0), ((2, 1, 2, 3), 3, 1)])
def test_conv_transpose_is_adjoint_of_conv(xs, cout, op, rng):
    cin = xs[1]
    x, w, b = leaf(rng, xs), leaf(rng, (cin, cout, 3, 3)), leaf(rng, (cout,))
    y = T.conv_transpose2d(x, w, None, output_padding=op)
    # <convT(x), u> == <x, conv(u)> with the same weights
    u = rng.normal(size=y.shape)
    lhs = np.sum(y.data * u)
    rhs = np.sum(x.data * conv_oracle(u, w.data))
    assert lhs == pytest.approx(rhs, rel=1e-12)
    assert T.grad_check(lambda: weighted(T.conv_transpose2d(x, w, b, output_padding=op),
                                         9), [x, w, b]) <= 1e-4


# dense SPD ops ---------------------------------------------------------------


@pytest.mark.parametrize("n,r", [(3, 2), (5, 5), (6, 1)])
def test_spd_solve_and_logdet(n, r, rng):
    A, M = leaf(rng, (n, n)), leaf(rng, (n, r))

    def K():
        return T.add(T.matmul(A, T.transpose(A)), T.Tensor(np.eye(n)))

    Kd = A.data @ A.data.T + np.eye(n)
    np.testing.assert_allclose(T.spd_solve(K(), M).data, np.linalg.solve(Kd, M.data), rtol=1e-10)
    assert float(T.spd_logdet(K()).data) == pytest.approx(np.linalg.slogdet(Kd)[1], rel=1e-12)
    assert T.grad_check(lambda: weighted(T.spd_solve(K(), M), 10), [A, M]) <= 1e-4
    assert T.grad_check(lambda: T.spd_logdet(K()), [A]) <= 1e-4


def test_spd_rejects_indefinite():
    with pytest.raises(ValueError):
        T.spd_logdet(T.Tensor(-np.eye(2)))


# grad_check contract ---------------------------------------------------------


def test_grad_check_square():
    x = T.Tensor(np.array(3.0), requires_grad=True)
    assert T.grad_check(lambda: T.square(x), [x], h=1e-5) <= 1e-6
    x.zero_grad()
    T.square(x).backward()
    assert x.grad == pytest.approx(6.0)


def test_grad_check_sigmoid_layer(rng):
    W, x = leaf(rng, (4, 3)), T.Tensor(rng.normal(size=(3, 1)))
    assert T.grad_check(lambda: T.tsum(T.sigmoid(T.matmul(W, x))), [W]) <= 1e-4


def test_grad_check_constant_function():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    assert T.grad_check(lambda: T.Tensor(np.array(5.0)), [x]) == 0.0


def test_grad_check_errors():
    x = T.Tensor(np.array([np.nan]), requires_grad=True)
    with pytest.raises(ValueError):
        T.grad_check(lambda: T.tsum(x), [x])
    y = T.Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
        T.grad_check(lambda: T.tsum(T.log(y)), [y])
    with pytest.raises(ValueError):
        T.grad_check(lambda: T.tsum(y), [y], h=0.0)


# graph mechanics -------------------------------------------------------------


def test_gradient_accumulates_across_backward_calls():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.tsum(T.mul(x, 2.0)).backward()
    T.tsum(T.mul(x, 3.0)).backward()
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])
    assert x.grad.shape == x.shape


def test_no_grad_builds_no_graph():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad
    assert T.is_grad_enabled()


def test_reused_node_gets_summed_gradient():
    x = T.Tensor(np.array(2.0), requires_grad=True)
    y = T.mul(x, x)
    T.add(y, y).backward()
    assert float(x.grad) == pytest.approx(8.0)


def test_float32_reductions_accumulate_in_float64():
    x = T.Tensor(np.full(10_000_001, 0.1, dtype=np.float32))
    s = T.tsum(x)
    assert s.dtype == np.float32
    assert s.data == np.float32(10_000_001 * np.float64(np.float32(0.1)))


def test_forward_is_deterministic(rng):
    x, w = rng.normal(size=(4, 2, 9, 9)), rng.normal(size=(3, 2, 3, 3))
    a = T.conv2d(T.Tensor(x), T.Tensor(w)).data
    b = T.conv2d(T.Tensor(x), T.Tensor(w)).data
    assert a.tobytes() == b.tobytes()
