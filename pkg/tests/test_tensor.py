import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geodsr import tensor as T
from geodsr.tensor import Tensor

from gradcheck import fd_check


def naive_conv(x, w, b):
    """Sextuple-loop zero-padded cross-correlation."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, cout, h, wd))
    for a in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = b[o]
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[a, c, i + u, j + v] * w[o, c, u, v]
                    out[a, o, i, j] = acc
    return out


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestConv2d:
    def test_full_window_sum(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, Tensor(np.zeros(1)), padding=1)
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.shape == (1, 1, 3, 3)

    def test_delta_kernel_is_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 1, 5, 6)).astype(np.float32))
        w = np.zeros((1, 1, 3, 3), np.float32)
        w[0, 0, 1, 1] = 1
        out = T.conv2d(x, Tensor(w), Tensor(np.zeros(1, np.float32)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, naive_conv(x, w, b), atol=1e-5)

    def test_linearity(self, rng):
        x, y = rng.normal(size=(2, 1, 2, 6, 7))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        lhs = T.conv2d(Tensor(2.5 * x - 0.7 * y), w).data
        rhs = 2.5 * T.conv2d(Tensor(x), w).data - 0.7 * T.conv2d(Tensor(y), w).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_edge_padding_keeps_constants(self):
        x = Tensor(np.full((1, 2, 4, 5), 0.3))
        w = Tensor(np.ones((1, 2, 3, 3)))
        out = T.conv2d(x, w, pad_mode="edge")
        np.testing.assert_allclose(out.data, 0.3 * 18)

    @pytest.mark.parametrize(
        "x_shape,w_shape",
        [((1, 2, 4, 4), (3, 3, 3, 3)), ((1, 2, 4, 4), (3, 2, 2, 2)), ((2, 4, 4), (1, 2, 3, 3))],
    )
    def test_shape_errors(self, x_shape, w_shape):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros(x_shape)), Tensor(np.zeros(w_shape)))

    def test_rejects_other_padding(self):
        with pytest.raises(ValueError, match="same padding"):
            T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), padding=0)

    def test_checked_mode_rejects_nan(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = np.nan
        with pytest.raises(T.ValidationError):
            T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))))

    @pytest.mark.parametrize("pad_mode", ["zeros", "edge"])
    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_gradients(self, rng, k, pad_mode):
        x, w, b = leaf(rng, 2, 3, 5, 4), leaf(rng, 2, 3, k, k), leaf(rng, 2)
        proj = rng.normal(size=(2, 2, 5, 4))
        err = fd_check(lambda: T.sum_all(T.conv2d(x, w, b, pad_mode=pad_mode) * Tensor(proj)), [x, w, b], rng)
        assert err < 1e-4


class TestLinear:
    def test_identity(self, rng):
        x = rng.normal(size=(4, 3))
        out = T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_arithmetic(self):
        out = T.linear(Tensor([1.0, 2.0]), Tensor([[1.0, 1.0], [1.0, -1.0]]), Tensor([0.0, 1.0]))
        np.testing.assert_allclose(out.data, [3.0, 0.0])

    def test_matches_loop_oracle(self, rng):
        x, w, b = rng.normal(size=(7, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
        ref = np.array([[sum(x[i, k] * w[j, k] for k in range(5)) + b[j] for j in range(3)] for i in range(7)])
        np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, ref, atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            T.linear(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 5))))

    def test_gradients(self, rng):
        x, w, b = leaf(rng, 2, 3, 5), leaf(rng, 4, 5), leaf(rng, 4)
        proj = Tensor(rng.normal(size=(2, 3, 4)))
        assert fd_check(lambda: T.sum_all(T.linear(x, w, b) * proj), [x, w, b], rng) < 1e-4


class TestGridSample:
    def test_integer_centers_are_exact(self, rng):
        feat = rng.normal(size=(3, 4, 5)).astype(np.float32)
        yy, xx = np.meshgrid(np.arange(4), np.arange(5), indexing="ij")
        coords = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(float)
        out = T.grid_sample_bilinear(Tensor(feat), coords)
        np.testing.assert_array_equal(out.data, feat.reshape(3, -1))

    def test_midpoint(self):
        feat = Tensor(np.array([[[2.0, 4.0]]]))
        out = T.grid_sample_bilinear(feat, np.array([[0.0, 0.5]]))
        assert out.data[0, 0] == 3.0

    def test_random_vs_four_texel_oracle(self, rng):
        feat = rng.normal(size=(2, 6, 7))
        coords = rng.uniform([0, 0], [5, 6], size=(50, 2))
        out = T.grid_sample_bilinear(Tensor(feat), coords).data
        for m, (y, x) in enumerate(coords):
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, 5), min(x0 + 1, 6)
            fy, fx = y - y0, x - x0
            ref = (
                feat[:, y0, x0] * (1 - fy) * (1 - fx)
                + feat[:, y0, x1] * (1 - fy) * fx
                + feat[:, y1, x0] * fy * (1 - fx)
                + feat[:, y1, x1] * fy * fx
            )
            np.testing.assert_allclose(out[:, m], ref, atol=1e-6)

    def test_out_of_range_clamps_to_border(self):
        feat = Tensor(np.arange(6.0).reshape(1, 2, 3))
        out = T.grid_sample_bilinear(feat, np.array([[-3.0, -3.0], [9.0, 9.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 5.0]])

    def test_empty_coords(self):
        out = T.grid_sample_bilinear(Tensor(np.ones((2, 3, 3))), np.zeros((0, 2)))
        assert out.shape == (2, 0)

    def test_non_finite_coords(self):
        with pytest.raises(T.ValidationError):
            T.grid_sample_bilinear(Tensor(np.ones((1, 3, 3))), np.array([[np.nan, 0.0]]))

    def test_gradients(self, rng):
        feat = leaf(rng, 3, 5, 6)
        coords = rng.uniform(-1, 6, size=(20, 2))
        proj = Tensor(rng.normal(size=(3, 20)))
        assert fd_check(lambda: T.sum_all(T.grid_sample_bilinear(feat, coords) * proj), [feat], rng) < 1e-4


class TestPointwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_sigmoid(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
        out = T.sigmoid(Tensor([-800.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_layer_norm_vector(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1))
        out = T.layer_norm_channels(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data.ravel()
        assert abs(out.mean()) < 1e-6
        assert abs(out.var() - 1) < 1e-6

    def test_layer_norm_random(self, rng):
        x = Tensor(rng.normal(2, 3, size=(2, 8, 4, 5)))
        out = T.layer_norm_channels(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=1), 1, atol=1e-5)

    def test_channel_broadcast(self, rng):
        x = rng.normal(size=(1, 3, 2, 2))
        bias = rng.normal(size=(1, 3, 1, 1))
        np.testing.assert_allclose(T.add(Tensor(x), Tensor(bias)).data, x + bias)

    def test_incompatible_shapes(self):
        with pytest.raises(ValueError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3))))

    def test_dispatch(self):
        with pytest.raises(ValueError, match="unknown"):
            T.pointwise(Tensor([1.0]), "tanh")

    @pytest.mark.parametrize("kind", ["add", "mul", "relu", "sigmoid", "layer_norm_channels"])
    def test_gradients(self, rng, kind):
        # keep relu inputs away from the kink
        x = leaf(rng, 1, 4, 3, 3)
        x.data += np.sign(x.data) * 0.05
        other = leaf(rng, 1, 4, 1, 3)
        gain, offset = leaf(rng, 4), leaf(rng, 4)
        proj = Tensor(rng.normal(size=(1, 4, 3, 3)))
        tensors = {"add": [x, other], "mul": [x, other], "layer_norm_channels": [x, gain, offset]}.get(kind, [x])
        loss = lambda: T.sum_all(T.pointwise(x, kind, other=other, gain=gain, offset=offset) * proj)
        assert fd_check(loss, tensors, rng) < 1e-4


class TestShapeOps:
    def test_avg_pool(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(T.avg_pool2x2(x).data.ravel(), [2.5, 4.5, 10.5, 12.5])

    def test_concat_take_transpose_gradients(self, rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 2, 4)
        proj = Tensor(rng.normal(size=(4, 5)))

        def loss():
            cat = T.concat([a, b], axis=1)
            return T.sum_all(T.transpose(T.take(cat, 1), (1, 0)) * proj)

        assert fd_check(loss, [a, b], rng) < 1e-4

    def test_avg_pool_gradient(self, rng):
        x = leaf(rng, 1, 2, 5, 6)
        proj = Tensor(rng.normal(size=(1, 2, 2, 3)))
        assert fd_check(lambda: T.sum_all(T.avg_pool2x2(x) * proj), [x], rng) < 1e-4


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        T.backward(T.sum_all(x * x))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_l1_subgradient(self, rng):
        p = Tensor(rng.normal(size=10), requires_grad=True)
        t = rng.normal(size=10)
        T.backward(T.mean(T.abs_(p - Tensor(t))))
        np.testing.assert_allclose(p.grad, np.sign(p.data - t) / 10)

    def test_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        T.backward(T.sum_all(x * x))
        T.backward(T.sum_all(x * x))
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_shared_node_visited_once(self):
        x = Tensor([1.5], requires_grad=True)
        y = x * x
        T.backward(T.sum_all(y + y))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.backward(x * x)

    def test_second_backward_raises(self):
        x = Tensor([1.0], requires_grad=True)
        loss = T.sum_all(x * x)
        T.backward(loss)
        with pytest.raises(T.GraphConsumedError):
            T.backward(loss)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * x
        assert not y.requires_grad

    def test_dtypes(self):
        assert T.tensor([1.0]).dtype == np.float32
        assert Tensor(np.arange(3)).dtype == np.float32
        assert Tensor(np.ones(2)).dtype == np.float64


@settings(max_examples=30, deadline=None)
@given(
    h=st.integers(1, 6),
    w=st.integers(1, 6),
    seed=st.integers(0, 2**31 - 1),
)
def test_grid_sample_identity_property(h, w, seed):
    feat = np.random.default_rng(seed).normal(size=(2, h, w)).astype(np.float32)
    from geodsr.geometry import make_target_grid

    out = T.grid_sample_bilinear(Tensor(feat), make_target_grid(h, w, h, w))
    np.testing.assert_array_equal(out.data, feat.reshape(2, -1))
