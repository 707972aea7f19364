import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff, max_rel_err
from dpl import tensor


def naive_matmul(a, b):
    P, Q = a.shape
    _, R = b.shape
    c = np.zeros((P, R))
    for p in range(P):
        for r in range(R):
            for q in range(Q):
                c[p, r] += a[p, q] * b[q, r]
    return c


def naive_conv(x, k, b, stride, pad):
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((cin, h + 2 * pad, w + 2 * pad))
    xp[:, pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            acc += k[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


def naive_maxpool(x, kh, kw, stride):
    c, h, w = x.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((c, ho, wo))
    arg = np.zeros((c, ho, wo), dtype=int)
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                best, besti = -np.inf, -1
                for u in range(kh):
                    for v in range(kw):
                        y, xx = i * stride + u, j * stride + v
                        flat = (ch * h + y) * w + xx
                        if x[ch, y, xx] > best or (x[ch, y, xx] == best and flat < besti):
                            best, besti = x[ch, y, xx], flat
                out[ch, i, j] = best
                arg[ch, i, j] = besti
    return out, arg


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2], [3, 4]])
        np.testing.assert_array_equal(tensor.matmul(np.eye(2), m), m)

    def test_row_times_column(self):
        assert tensor.matmul(np.array([[1.0, 2]]), np.array([[3.0], [4]])).tolist() == [[11.0]]

    def test_random_vs_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
        np.testing.assert_allclose(tensor.matmul(a, b), naive_matmul(a, b), rtol=1e-14, atol=1e-14)

    def test_shape_error_names_shapes(self):
        with pytest.raises(tensor.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tensor.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_backward_zero(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
        ga, gb = tensor.matmul_backward(a, b, np.zeros((2, 4)))
        assert not ga.any() and not gb.any()

    def test_backward_scalar(self):
        ga, gb = tensor.matmul_backward(np.array([[1.0]]), np.array([[2.0]]), np.array([[1.0]]))
        assert ga.tolist() == [[2.0]] and gb.tolist() == [[1.0]]

    def test_backward_finite_difference(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        gc = rng.normal(size=(3, 2))
        ga, gb = tensor.matmul_backward(a, b, gc)
        f = lambda: float(np.sum(tensor.matmul(a, b) * gc))
        assert max_rel_err(ga, central_diff(f, a)) <= 1e-6
        assert max_rel_err(gb, central_diff(f, b)) <= 1e-6

    def test_backward_shape_error(self):
        with pytest.raises(tensor.ShapeError):
            tensor.matmul_backward(np.zeros((2, 3)), np.zeros((3, 4)), np.zeros((2, 5)))


class TestConv:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 5, 6))
        out = tensor.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1), 1, 0)
        np.testing.assert_array_equal(out, x)

    def test_zero_kernel_bias(self, rng):
        x = rng.normal(size=(2, 5, 5))
        out = tensor.conv2d(x, np.zeros((3, 2, 3, 3)), np.array([0.5, -1.0, 2.0]), 1, 1)
        for o, beta in enumerate([0.5, -1.0, 2.0]):
            assert np.all(out[o] == beta)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_random_vs_naive(self, rng, stride, pad):
        x, k, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        np.testing.assert_allclose(tensor.conv2d(x, k, b, stride, pad), naive_conv(x, k, b, stride, pad), atol=1e-12)

    def test_output_size(self, rng):
        out = tensor.conv2d(rng.normal(size=(1, 9, 7)), rng.normal(size=(2, 1, 3, 2)), np.zeros(2), 2, 1)
        assert out.shape == (2, (9 + 2 - 3) // 2 + 1, (7 + 2 - 2) // 2 + 1)

    def test_kernel_too_large(self):
        with pytest.raises(tensor.ShapeError, match="larger than padded input"):
            tensor.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))

    def test_backward_zero(self, rng):
        x, k = rng.normal(size=(2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
        gx, gk, gb = tensor.conv2d_backward(x, k, np.zeros((3, 4, 4)), 1, 1)
        assert not gx.any() and not gk.any() and not gb.any()

    def test_backward_identity(self, rng):
        x, g = rng.normal(size=(1, 4, 5)), rng.normal(size=(1, 4, 5))
        gx, _, gb = tensor.conv2d_backward(x, np.ones((1, 1, 1, 1)), g, 1, 0)
        np.testing.assert_array_equal(gx, g)
        assert gb[0] == pytest.approx(g.sum())

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
    def test_backward_finite_difference(self, rng, stride, pad):
        x, k, b = rng.normal(size=(2, 5, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        out = tensor.conv2d(x, k, b, stride, pad)
        g = rng.normal(size=out.shape)
        gx, gk, gb = tensor.conv2d_backward(x, k, g, stride, pad)
        f = lambda: float(np.sum(tensor.conv2d(x, k, b, stride, pad) * g))
        assert max_rel_err(gx, central_diff(f, x)) <= 1e-6
        assert max_rel_err(gk, central_diff(f, k)) <= 1e-6
        assert max_rel_err(gb, central_diff(f, b)) <= 1e-6

    def test_backward_shape_error(self, rng):
        with pytest.raises(tensor.ShapeError):
            tensor.conv2d_backward(rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 1, 3, 3)), np.zeros((1, 4, 4)))


class TestRelu:
    def test_forward(self):
        assert tensor.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]

    def test_backward(self):
        out = tensor.relu_backward(np.array([-1.0, 0.0, 2.0]), np.array([5.0, 5.0, 5.0]))
        assert out.tolist() == [0, 0, 5]

    def test_backward_finite_difference(self, rng):
        x = rng.normal(size=(4, 5))
        x[np.abs(x) < 1e-3] = 0.5  # stay away from the kink
        g = rng.normal(size=x.shape)
        f = lambda: float(np.sum(tensor.relu(x) * g))
        assert max_rel_err(tensor.relu_backward(x, g), central_diff(f, x)) <= 1e-6


class TestMaxPool:
    def test_constant_input_first_index(self):
        out, arg = tensor.maxpool2d(np.full((1, 4, 4), 3.0), 2, 2, 2)
        assert np.all(out == 3.0)
        assert arg.ravel().tolist() == [0, 2, 8, 10]

    def test_two_by_two(self):
        out, arg = tensor.maxpool2d(np.array([[[1.0, 2], [3, 4]]]), 2, 2, 2)
        assert out.ravel().tolist() == [4.0] and arg.ravel().tolist() == [3]

    @pytest.mark.parametrize("k,s", [(2, 2), (3, 1), (3, 2), (2, 1)])
    def test_random_vs_brute_force(self, rng, k, s):
        x = rng.integers(0, 4, size=(2, 7, 6)).astype(float)  # many ties
        out, arg = tensor.maxpool2d(x, k, k, s)
        o_ref, a_ref = naive_maxpool(x, k, k, s)
        np.testing.assert_array_equal(out, o_ref)
        np.testing.assert_array_equal(arg, a_ref)

    def test_ceil_mode_covers_border(self):
        x = np.arange(25, dtype=float).reshape(1, 5, 5)
        out, arg = tensor.maxpool2d(x, 2, 2, 2, ceil_mode=True)
        assert out.shape == (1, 3, 3)
        assert out[0, 2, 2] == 24 and arg[0, 2, 2] == 24
        assert out[0, 0, 2] == 9

    def test_window_exceeds_input(self):
        with pytest.raises(tensor.ShapeError):
            tensor.maxpool2d(np.zeros((1, 2, 2)), 3, 3, 1)

    def test_backward_routes_and_conserves(self, rng):
        x = rng.normal(size=(3, 6, 6))
        out, arg = tensor.maxpool2d(x, 3, 3, 1)
        g = rng.normal(size=out.shape)
        gx = tensor.maxpool2d_backward(arg, g, x.shape)
        assert gx.sum() == pytest.approx(g.sum())
        winners = np.zeros(x.size, dtype=bool)
        winners[arg.ravel()] = True
        assert not gx.ravel()[~winners].any()

    def test_backward_finite_difference(self, rng):
        x = rng.normal(size=(2, 6, 5))
        out, arg = tensor.maxpool2d(x, 2, 2, 2, ceil_mode=True)
        g = rng.normal(size=out.shape)
        f = lambda: float(np.sum(tensor.maxpool2d(x, 2, 2, 2, ceil_mode=True)[0] * g))
        assert max_rel_err(tensor.maxpool2d_backward(arg, g, x.shape), central_diff(f, x)) <= 1e-6


class TestSGD:
    def test_zero_grad_unchanged(self):
        p = np.array([1.0, -2.0])
        tensor.sgd_update(p, np.zeros(2), np.zeros(2), 0.1, 0.9, 0.0)
        assert p.tolist() == [1.0, -2.0]

    def test_single_step(self):
        p = np.array([1.0])
        tensor.sgd_update(p, np.array([1.0]), np.zeros(1), 0.1, 0.0, 0.0)
        assert p[0] == pytest.approx(0.9, abs=1e-15)

    def test_two_steps_momentum_unrolled(self):
        lr, mu, wd = 0.1, 0.9, 0.0005
        p0, g1, g2 = 1.0, 0.5, -0.25
        v1 = g1 + wd * p0
        p1 = p0 - lr * v1
        v2 = mu * v1 + g2 + wd * p1
        p2 = p1 - lr * v2
        p, v = np.array([p0]), np.zeros(1)
        tensor.sgd_update(p, np.array([g1]), v, lr, mu, wd)
        tensor.sgd_update(p, np.array([g2]), v, lr, mu, wd)
        assert p[0] == pytest.approx(p2, abs=1e-15)
        assert v[0] == pytest.approx(v2, abs=1e-15)

    def test_non_finite_grad(self):
        with pytest.raises(tensor.NumericalError, match="non-finite"):
            tensor.sgd_update(np.ones(2), np.array([1.0, np.nan]), np.zeros(2), 0.1, 0.9, 0.0)


@settings(max_examples=25, deadline=None)
@given(
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
    h=st.integers(3, 8),
    w=st.integers(3, 8),
    k=st.integers(1, 3),
    stride=st.integers(1, 2),
    pad=st.integers(0, 1),
    seed=st.integers(0, 10_000),
)
def test_conv_backward_property(cin, cout, h, w, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x, kern, b = r.normal(size=(cin, h, w)), r.normal(size=(cout, cin, k, k)), r.normal(size=cout)
    out = tensor.conv2d(x, kern, b, stride, pad)
    g = r.normal(size=out.shape)
    gx, gk, gb = tensor.conv2d_backward(x, kern, g, stride, pad)
    f = lambda: float(np.sum(tensor.conv2d(x, kern, b, stride, pad) * g))
    assert max_rel_err(gx, central_diff(f, x)) <= 1e-6
    assert max_rel_err(gk, central_diff(f, kern)) <= 1e-6


def test_kernels_deterministic(rng):
    x, k, b = rng.normal(size=(3, 16, 16)), rng.normal(size=(8, 3, 5, 5)), rng.normal(size=8)
    a1 = tensor.conv2d(x, k, b, 1, 2)
    a2 = tensor.conv2d(x.copy(), k.copy(), b.copy(), 1, 2)
    assert a1.tobytes() == a2.tobytes()
    g = rng.normal(size=a1.shape)
    r1 = tensor.conv2d_backward(x, k, g, 1, 2)
    r2 = tensor.conv2d_backward(x, k, g, 1, 2)
    assert all(u.tobytes() == v.tobytes() for u, v in zip(r1, r2))
