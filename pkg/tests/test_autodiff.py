import numpy as np
import pytest

from crackdet.autodiff import (
    AdamState, BatchNormState, PoolIndices, Tensor, adam_step, batchnorm2d, bce_with_logits, concat, conv2d,
    grad_check, he_init, load_checkpoint, max_unpool2d, maxpool2d, parameter, relu, save_checkpoint, sigmoid,
    upsample_bilinear,
)
from crackdet.autodiff.ops import bilinear_matrix
from crackdet.errors import CorruptFile, IndexOutOfWindow, ShapeMismatch


def weighted_sum(t: Tensor, r: np.ndarray) -> Tensor:
    """Scalar sum(t * r) for a fixed array r, so every output coordinate is probed."""
    return Tensor((t.data * r).sum(), parents=(t,), backward_fn=lambda g: (g * r,))


def check(op, *shapes, seed=0, h=1e-5, positive=False):
    rng = np.random.default_rng(seed)
    inputs = [parameter(rng.uniform(0.1, 1.0, s) if positive else rng.standard_normal(s)) for s in shapes]
    r = rng.standard_normal(op(*inputs).shape)
    return grad_check(lambda: weighted_sum(op(*inputs), r), inputs, h=h)


class TestConv:
    def test_ones_kernel_counts_overlap(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        y = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert y.data[0, 0].tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]

    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 6, 5)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(conv2d(x, Tensor(k)).data, x.data)

    def test_against_loop_reference(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.standard_normal((2, 3, 6, 7)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 6, 7))
        for n in range(2):
            for o in range(4):
                for i in range(6):
                    for j in range(7):
                        ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
        for method in ("im2col", "direct"):
            out = conv2d(Tensor(x), Tensor(w), Tensor(b), method=method).data
            np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_paths_agree(self):
        rng = np.random.default_rng(2)
        for stride, k in [(1, 3), (2, 3), (1, 1)]:
            x = parameter(rng.standard_normal((2, 3, 8, 8)))
            w = parameter(rng.standard_normal((5, 3, k, k)))
            outs, grads = [], []
            for method in ("im2col", "direct"):
                x.zero_grad(), w.zero_grad()
                y = conv2d(x, w, stride=stride, method=method)
                y.sum().backward()
                outs.append(y.data)
                grads.append((x.grad, w.grad))
            np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)
            np.testing.assert_allclose(grads[0][0], grads[1][0], atol=1e-12)
            np.testing.assert_allclose(grads[0][1], grads[1][1], atol=1e-12)

    def test_strided_shape(self):
        y = conv2d(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((3, 2, 3, 3))), stride=2)
        assert y.shape == (1, 3, 4, 4)

    def test_same_size(self):
        assert conv2d(Tensor(np.zeros((1, 2, 5, 7))), Tensor(np.zeros((1, 2, 3, 3)))).shape == (1, 1, 5, 7)

    @pytest.mark.parametrize("stride,k,method", [(1, 3, "im2col"), (2, 3, "im2col"), (1, 1, "im2col"),
                                                 (1, 3, "direct"), (2, 3, "direct")])
    def test_gradients(self, stride, k, method):
        err = check(lambda x, w, b: conv2d(x, w, b, stride=stride, method=method), (1, 2, 6, 6), (3, 2, k, k), (3,))
        assert err <= 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_size_restricted(self):
        with pytest.raises(ShapeMismatch):
            conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 5, 5))))


class TestPooling:
    def test_window(self):
        y, idx = maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert y.data.item() == 4.0
        assert idx.flat.item() == 3

    def test_first_max_wins_ties(self):
        _, idx = maxpool2d(Tensor(np.array([[[[5.0, 5.0], [5.0, 1.0]]]])))
        assert idx.flat.item() == 0

    def test_unpool_places_maxima(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 6, 8))
        y, idx = maxpool2d(Tensor(x))
        u = max_unpool2d(y, idx).data
        assert np.count_nonzero(u) == y.data.size
        nz = u != 0
        np.testing.assert_array_equal(u[nz], x[nz])
        win = x.reshape(2, 3, 3, 2, 4, 2).max(axis=(3, 5))
        np.testing.assert_array_equal(y.data, win)

    def test_fixed_point_after_relu(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x = relu(Tensor(rng.standard_normal((2, 2, 8, 8))))
            y, idx = maxpool2d(x)
            y2, _ = maxpool2d(max_unpool2d(y, idx))
            np.testing.assert_array_equal(y2.data, y.data)

    def test_fixed_point_fails_for_negative_windows(self):
        # zero fill outranks a negative maximum, so the identity needs non-negative input
        y, idx = maxpool2d(Tensor(-np.ones((1, 1, 2, 2))))
        y2, _ = maxpool2d(max_unpool2d(y, idx))
        assert y2.data.item() == 0.0 != y.data.item()

    def test_pool_gradient_routes_to_winners(self):
        x = parameter(np.random.default_rng(3).standard_normal((1, 1, 4, 4)))
        y, idx = maxpool2d(x)
        y.sum().backward()
        expected = np.zeros(16)
        expected[idx.flat.ravel()] = 1
        np.testing.assert_array_equal(x.grad.ravel(), expected)

    def test_gradients(self):
        assert check(lambda x: maxpool2d(x)[0], (2, 2, 6, 6)) <= 1e-6
        rng = np.random.default_rng(4)
        _, idx = maxpool2d(Tensor(rng.standard_normal((2, 2, 6, 6))))
        assert check(lambda y: max_unpool2d(y, idx), (2, 2, 3, 3)) <= 1e-6

    def test_odd_size(self):
        with pytest.raises(ShapeMismatch):
            maxpool2d(Tensor(np.zeros((1, 1, 3, 4))))

    def test_corrupt_indices(self):
        bad = PoolIndices(np.array([[[[0, 1]]]]), (2, 4))
        with pytest.raises(IndexOutOfWindow):
            max_unpool2d(Tensor(np.ones((1, 1, 1, 2))), bad)


class TestResampleAndMerge:
    def test_bilinear_rows_sum_to_one(self):
        for n_in, n_out in [(2, 4), (4, 64), (3, 3), (8, 32)]:
            np.testing.assert_allclose(bilinear_matrix(n_in, n_out).sum(axis=1), 1.0, atol=1e-15)

    def test_bilinear_doubling(self):
        np.testing.assert_allclose(bilinear_matrix(2, 4), [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])

    def test_constant_preserved(self):
        y = upsample_bilinear(Tensor(np.full((1, 2, 3, 4), 2.5)), (12, 16))
        np.testing.assert_allclose(y.data, 2.5, atol=1e-15)

    def test_gradients(self):
        assert check(lambda x: upsample_bilinear(x, (8, 12)), (2, 2, 2, 3)) <= 1e-6
        assert check(lambda a, b: concat([a, b]), (1, 2, 3, 3), (1, 1, 3, 3)) <= 1e-6


class TestActivations:
    def test_relu(self):
        assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]

    def test_sigmoid(self):
        out = sigmoid(Tensor(np.array([0.0, -40.0, 40.0, -1000.0, 1000.0]))).data
        assert out[0] == 0.5 and np.all(np.isfinite(out))
        assert out[1] > 0 and out[2] == pytest.approx(1.0)

    def test_gradients(self):
        assert check(relu, (2, 3, 4, 4)) <= 1e-6
        assert check(sigmoid, (2, 3, 4, 4)) <= 1e-6


class TestBatchNorm:
    def test_training_normalizes(self):
        x = Tensor(np.random.default_rng(0).normal(3.0, 2.0, (4, 3, 5, 5)))
        st = BatchNormState(3)
        y = batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), st, training=True).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)

    def test_running_update(self):
        x = np.random.default_rng(1).standard_normal((2, 2, 3, 3)) + 5
        st = BatchNormState(2)
        batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st, training=True)
        np.testing.assert_allclose(st.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_eval_uses_running_stats(self):
        st = BatchNormState(1)
        st.running_mean[:] = 2.0
        st.running_var[:] = 4.0 - st.eps
        y = batchnorm2d(Tensor(np.full((1, 1, 2, 2), 6.0)), Tensor([1.0]), Tensor([0.5]), st, training=False)
        np.testing.assert_allclose(y.data, 2.5)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, training):
        st = BatchNormState(3)
        st.running_mean[:] = [0.1, -0.2, 0.3]
        st.running_var[:] = [0.5, 1.5, 2.0]

        def op(x, g, b):
            saved = st.running_mean.copy(), st.running_var.copy()
            out = batchnorm2d(x, g, b, st, training)
            st.running_mean, st.running_var = saved
            return out

        assert check(op, (2, 3, 4, 4), (3,), (3,)) <= 1e-5

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            batchnorm2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                        BatchNormState(3), True)


class TestBce:
    def test_zero_logits(self):
        y = np.random.default_rng(0).integers(0, 2, (1, 1, 4, 4))
        assert bce_with_logits(Tensor(np.zeros((1, 1, 4, 4))), y).item() == pytest.approx(np.log(2), abs=1e-15)

    def test_saturated_correct(self):
        y = np.random.default_rng(1).integers(0, 2, (1, 1, 4, 4))
        assert bce_with_logits(Tensor(np.where(y == 1, 40.0, -40.0)), y).item() <= 1e-15

    def test_gradient_closed_form(self):
        rng = np.random.default_rng(2)
        z, y = rng.normal(0, 5, (2, 1, 3, 3)), rng.integers(0, 2, (2, 1, 3, 3))
        f = parameter(z)
        bce_with_logits(f, y).backward()
        np.testing.assert_allclose(f.grad * z.size, 1 / (1 + np.exp(-z)) - y, atol=1e-12)

    def test_matches_raw_log_form(self):
        rng = np.random.default_rng(3)
        z, y = rng.normal(0, 3, (1, 1, 5, 5)), rng.integers(0, 2, (1, 1, 5, 5))
        p = 1 / (1 + np.exp(-z))
        raw = np.mean(-y * np.log(p) - (1 - y) * np.log(1 - p))
        assert bce_with_logits(Tensor(z), y).item() == pytest.approx(raw, abs=1e-12)

    def test_finite_differences(self):
        y = np.random.default_rng(4).integers(0, 2, (1, 1, 4, 4))
        f = parameter(np.random.default_rng(5).standard_normal((1, 1, 4, 4)))
        assert grad_check(lambda: bce_with_logits(f, y), [f]) <= 1e-6

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            z, y = rng.normal(0, 20, (1, 1, 3, 3)), rng.integers(0, 2, (1, 1, 3, 3))
            assert bce_with_logits(Tensor(z), y).item() >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            bce_with_logits(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))


class TestGradCheckHarness:
    def test_linear_layer(self):
        rng = np.random.default_rng(0)
        x = parameter(rng.standard_normal((1, 4, 3, 3)))
        w = parameter(rng.standard_normal((2, 4, 1, 1)))
        assert grad_check(lambda: conv2d(x, w).sum(), [x, w]) <= 1e-9

    def test_sign_flip_detected(self):
        def broken_relu(x):
            mask = x.data > 0
            return Tensor(x.data * mask, parents=(x,), backward_fn=lambda g: (-g * mask,))

        assert check(broken_relu, (1, 2, 4, 4)) > 0.1

    def test_step_range(self):
        x = parameter(np.ones(3))
        with pytest.raises(ValueError):
            grad_check(lambda: x.sum(), [x], h=1e-3)

    def test_samples_at_most_512(self):
        calls = []
        x = parameter(np.random.default_rng(0).standard_normal(2000))

        def fn():
            calls.append(1)
            return x.sum()

        grad_check(fn, [x])
        assert len(calls) == 1 + 2 * 512


class TestOptim:
    def test_adam_hand_step(self):
        p = np.zeros(1)
        st = AdamState.for_params([p])
        adam_step([p], [np.ones(1)], st)
        assert st.m[0].item() == pytest.approx(0.1)
        assert st.v[0].item() == pytest.approx(0.001)
        expected = -1e-5 * (0.1 / 0.1) / (np.sqrt(0.001 / 0.001) + 1e-8)
        assert p.item() == pytest.approx(expected, rel=1e-12)
        assert p.item() == pytest.approx(-1e-5, rel=1e-7)

    def test_zero_gradient_is_noop(self):
        p = np.array([1.5, -2.0])
        st = AdamState.for_params([p])
        adam_step([p], [np.zeros(2)], st)
        adam_step([p], [None], st)
        assert p.tolist() == [1.5, -2.0] and st.step == 2

    def test_shape_mismatch(self):
        p = np.zeros(2)
        with pytest.raises(ShapeMismatch):
            adam_step([p], [np.zeros(3)], AdamState.for_params([p]))

    def test_minimizes_quadratic(self):
        p = np.array([3.0])
        st = AdamState.for_params([p], lr=0.05)
        for _ in range(500):
            adam_step([p], [2 * p], st)
        assert abs(p.item()) < 0.05

    def test_he_variance(self):
        w = he_init((1000, 1000), 72, np.random.default_rng(0))
        assert w.var() == pytest.approx(2 / 72, rel=0.05)
        assert abs(w.mean()) < 3 * np.sqrt(2 / 72 / 1e6)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"a.w": rng.standard_normal((2, 3, 3, 3)), "b": rng.standard_normal(4), "s": np.array(2.5)}
        save_checkpoint(arrays, tmp_path / "c.hckp")
        back = load_checkpoint(tmp_path / "c.hckp")
        assert list(back) == list(arrays)
        for k in arrays:
            assert back[k].shape == arrays[k].shape
            assert back[k].tobytes() == arrays[k].tobytes()

    def test_layout(self, tmp_path):
        save_checkpoint({"w": np.array([1.0, 2.0])}, tmp_path / "c.hckp")
        raw = (tmp_path / "c.hckp").read_bytes()
        assert raw[:8] == b"HCKP\x01\x00\x00\x00"
        assert raw[8:10] == b"\x01\x00" and raw[10:11] == b"w"
        assert raw[11] == 1 and raw[12:16] == b"\x02\x00\x00\x00"
        assert np.frombuffer(raw[16:], "<f8").tolist() == [1.0, 2.0]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.hckp").write_bytes(b"XXXX\x01\x00\x00\x00")
        with pytest.raises(CorruptFile):
            load_checkpoint(tmp_path / "c.hckp")

    def test_truncated(self, tmp_path):
        save_checkpoint({"w": np.ones(10)}, tmp_path / "c.hckp")
        raw = (tmp_path / "c.hckp").read_bytes()
        (tmp_path / "c.hckp").write_bytes(raw[:-8])
        with pytest.raises(CorruptFile):
            load_checkpoint(tmp_path / "c.hckp")


class TestTape:
    def test_shared_node_accumulates(self):
        x = parameter(np.array([2.0]))
        y = x + x
        (y + x).sum().backward()
        assert x.grad.tolist() == [3.0]

    def test_deep_graph(self):
        x = parameter(np.ones(1))
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.sum().backward()
        assert x.grad.tolist() == [1.0]

    def test_constants_get_no_grad(self):
        c = Tensor(np.ones(2))
        x = parameter(np.ones(2))
        (x + c).sum().backward()
        assert c.grad is None and x.grad.tolist() == [1.0, 1.0]
