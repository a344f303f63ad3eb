import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointmae.engine import (
    NonFiniteError,
    OptimizerState,
    ParameterTree,
    Schedule,
    ShapeError,
    Tensor,
    adamw_step,
    additive_mask,
    backward,
    clip_grad_norm,
    concat,
    conv2d_3x3_s2,
    gather_rows,
    gelu,
    grad_check,
    layer_norm,
    linear,
    lr_at,
    make_node,
    masked_softmax,
    matmul,
    max_,
    mean,
    mul,
    no_grad,
    reshape,
    split,
    squared_error,
    sum_,
    transpose,
)
from jointmae.engine import checkpoint
from jointmae.engine.gradcheck import NondeterministicGraph


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


class TestForward:
    def test_identity_matmul(self, rng):
        a = rng.normal(size=(3, 5))
        assert np.array_equal(matmul(np.eye(3), a).data, a)

    def test_uniform_softmax_row(self):
        out = masked_softmax(np.zeros((1, 4)), np.zeros((1, 4))).data
        np.testing.assert_allclose(out, 0.25)

    def test_conv_constant_map(self):
        x = np.full((1, 8, 8, 1), 2.5)
        y = conv2d_3x3_s2(x, np.ones((3, 3, 1, 1))).data[0, :, :, 0]
        assert y.shape == (4, 4)
        # output (i, j) reads input rows 2i-1..2i+1; row/col -1 is zero padding
        np.testing.assert_allclose(y[1:, 1:], 9 * 2.5)
        np.testing.assert_allclose(y[0, 1:], 6 * 2.5)
        np.testing.assert_allclose(y[0, 0], 4 * 2.5)

    def test_conv_matches_direct_oracle(self, rng):
        x = rng.normal(size=(2, 7, 6, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        b = rng.normal(size=4)
        pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        Ho, Wo = 4, 3
        want = np.zeros((2, Ho, Wo, 4))
        for i in range(Ho):
            for j in range(Wo):
                patch = pad[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                want[:, i, j] = np.einsum("bhwc,hwco->bo", patch, w) + b
        np.testing.assert_allclose(conv2d_3x3_s2(x, w, b).data, want, atol=1e-12)

    def test_linear_matches_numpy(self, rng):
        x, w, b = rng.normal(size=(2, 5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
        np.testing.assert_allclose(linear(x, w, b).data, x @ w + b)

    def test_layer_norm_statistics(self, rng):
        y = layer_norm(rng.normal(3.0, 2.0, size=(6, 16)), np.ones(16), np.zeros(16)).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-4)

    def test_gelu_reference_values(self):
        x = np.array([-2.0, 0.0, 1.0])
        c = math.sqrt(2 / math.pi)
        want = [0.5 * v * (1 + math.tanh(c * (v + 0.044715 * v**3))) for v in x]
        np.testing.assert_allclose(gelu(x).data, want)

    def test_split_concat_roundtrip(self, rng):
        x = rng.normal(size=(3, 7))
        parts = split(x, [2, 5], axis=1)
        assert [p.shape for p in parts] == [(3, 2), (3, 5)]
        assert np.array_equal(concat(parts, axis=1).data, x)

    def test_gather_rows_shape(self, rng):
        x = rng.normal(size=(5, 3))
        idx = np.array([[0, 4], [2, 2]])
        out = gather_rows(x, idx)
        assert out.shape == (2, 2, 3)
        assert np.array_equal(out.data[1, 0], x[2])


class TestErrors:
    def test_shape_mismatch_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_nonfinite_names_op(self):
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="mul"):
            mul(np.array([1e200]), np.array([1e200]))

    def test_backward_requires_scalar(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ValueError):
            backward(mul(x, 2.0))

    def test_split_sizes_must_cover(self):
        with pytest.raises(ShapeError):
            split(np.ones((2, 3)), [2, 2], axis=1)


class TestMaskedSoftmax:
    @given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 10_000))
    def test_rows_sum_to_one_and_invalid_is_zero(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        valid = rng.uniform(size=(rows, cols)) < 0.5
        valid[:, 0] = True
        y = masked_softmax(rng.normal(0, 5, size=(rows, cols)), additive_mask(valid)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(y[~valid] == 0.0)

    def test_fully_invalid_row_is_zero(self):
        y = masked_softmax(np.zeros((1, 3)), additive_mask(np.zeros((1, 3), bool))).data
        assert np.all(y == 0.0)


class TestBackward:
    def test_sum_of_squares(self):
        x = leaf([1.0, 2.0, 3.0])
        backward(sum_(mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_accumulates_and_resets(self):
        x = leaf([1.0, 2.0, 3.0])
        backward(sum_(mul(x, x)))
        backward(sum_(mul(x, x)))
        np.testing.assert_allclose(x.grad, [4.0, 8.0, 12.0])
        x.zero_grad()
        assert np.all(x.grad == 0.0)

    def test_shared_subexpression(self):
        x = leaf([3.0])
        y = mul(x, x)
        backward(sum_(mul(y, y)))          # x^4
        np.testing.assert_allclose(x.grad, [4 * 27.0])

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad

    @given(st.integers(0, 10_000))
    def test_composed_graph_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        params = {"x": leaf(rng.normal(size=(3, 4))), "w": leaf(rng.normal(size=(4, 2)))}
        t = Tensor(rng.normal(size=(2, 3)))

        def build(p):
            h = transpose(reshape(matmul(p["x"], p["w"]), (3, 2)), (1, 0))
            return add_mean(squared_error(h, t), mean(max_(p["x"], axis=0)))

        assert grad_check(build, params, tolerance=1e-5).passed


def add_mean(a, b):
    return sum_(concat([reshape(a, (1,)), reshape(b, (1,))], axis=0))


class TestGradCheck:
    def test_linear_layer_passes(self, rng):
        params = {"w": leaf(rng.normal(size=(4, 3))), "b": leaf(rng.normal(size=3))}
        x, t = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
        rep = grad_check(lambda p: squared_error(linear(x, p["w"], p["b"]), t), params, tolerance=1e-5)
        assert rep.passed and rep.max_error <= 1e-5

    def test_attention_block_passes(self, rng):
        params = {"x": leaf(rng.normal(size=(5, 4))), "wq": leaf(rng.normal(size=(4, 4)))}
        valid = np.eye(5, dtype=bool) | (rng.uniform(size=(5, 5)) < 0.5)

        def build(p):
            q = matmul(p["x"], p["wq"])
            w = masked_softmax(matmul(q, transpose(p["x"], (1, 0))), additive_mask(valid))
            return sum_(mul(matmul(w, p["x"]), matmul(w, p["x"])))

        assert grad_check(build, params, tolerance=1e-4).passed

    def test_corrupted_backward_fails(self, rng):
        def bad_square(x):
            return make_node(x.data ** 2, (x,), lambda g: (g * 3.0 * x.data,), "bad_square")

        params = {"x": leaf(rng.normal(size=4))}
        rep = grad_check(lambda p: sum_(bad_square(p["x"])), params, tolerance=1e-4)
        assert not rep.passed
        assert rep.errors["x"] > 0.1

    def test_nondeterministic_builder_raises(self, rng):
        noise = np.random.default_rng(0)
        params = {"x": leaf([1.0])}
        with pytest.raises(NondeterministicGraph):
            grad_check(lambda p: sum_(mul(p["x"], noise.normal())), params)


class TestAdamW:
    def test_first_step_by_hand(self):
        tree = ParameterTree()
        p = tree.add("p", np.array([0.5]))
        p.grad = np.array([0.2])
        st_ = OptimizerState(lr=0.1, weight_decay=0.0)
        adamw_step(tree, st_)
        m = 0.1 * 0.2 / (1 - 0.9)
        v = 0.001 * 0.04 / (1 - 0.999)
        np.testing.assert_allclose(p.data, 0.5 - 0.1 * m / (math.sqrt(v) + 1e-8), rtol=1e-12)

    def test_pure_decay_with_zero_grad(self):
        tree = ParameterTree()
        p = tree.add("p", np.array([2.0]))
        p.grad = np.zeros(1)
        adamw_step(tree, OptimizerState(lr=0.1, weight_decay=0.05))
        np.testing.assert_allclose(p.data, 2.0 - 0.1 * 0.05 * 2.0)

    def test_second_step_bias_correction(self):
        tree = ParameterTree()
        p = tree.add("p", np.array([0.0]))
        st_ = OptimizerState(lr=1.0, betas=(0.9, 0.999), eps=0.0)
        g = 0.3
        for _ in range(2):
            p.grad = np.array([g])
            adamw_step(tree, st_)
        # m_t / (1 - b1^t) == g and v_t / (1 - b2^t) == g^2 for constant g: each step moves by lr
        np.testing.assert_allclose(p.data, -2.0, rtol=1e-12)
        assert st_.step == 2

    def test_missing_grad_names_path(self):
        tree = ParameterTree()
        tree.add("enc.w", np.ones(2)).grad = None
        with pytest.raises(ValueError, match="enc.w"):
            adamw_step(tree, OptimizerState())

    def test_clip_scales_to_max_norm(self):
        tree = ParameterTree()
        p = tree.add("p", np.zeros(2))
        p.grad = np.array([30.0, 40.0])
        assert clip_grad_norm(tree, 10.0) == pytest.approx(50.0)
        np.testing.assert_allclose(np.linalg.norm(p.grad), 10.0, rtol=1e-9)


class TestSchedule:
    cfg = Schedule(base_lr=1e-3, min_lr=1e-5, warmup_epochs=3, total_epochs=40)

    def test_boundaries(self):
        assert lr_at(0, self.cfg) == 0.0
        assert lr_at(3, self.cfg) == pytest.approx(1e-3)
        assert lr_at(40, self.cfg) == pytest.approx(1e-5)

    def test_decay_midpoint(self):
        assert lr_at(3 + 37 / 2, self.cfg) == pytest.approx((1e-3 + 1e-5) / 2)

    @given(st.floats(0, 39.99), st.floats(0, 39.99))
    def test_monotone_after_warmup(self, a, b):
        a, b = sorted((max(a, 3.0), max(b, 3.0)))
        assert lr_at(a, self.cfg) >= lr_at(b, self.cfg)


class TestParameterTree:
    def test_lexicographic_iteration(self):
        tree = ParameterTree()
        for name in ("b.x", "a.z", "a.b"):
            tree.zeros(name, (1,))
        assert list(tree) == ["a.b", "a.z", "b.x"]

    def test_duplicate_path_rejected(self):
        tree = ParameterTree()
        tree.zeros("w", (1,))
        with pytest.raises(KeyError):
            tree.zeros("w", (1,))

    def test_init_independent_of_siblings(self):
        a, b = ParameterTree(7), ParameterTree(7)
        a.linear("x", 3, 4)
        b.linear("other", 5, 5)
        b.linear("x", 3, 4)
        assert np.array_equal(a["x.w"].data, b["x.w"].data)

    def test_save_load_save_identical_bytes(self, tmp_path, rng):
        tree = ParameterTree(3)
        tree.linear("enc.fc", 4, 6)
        tree.add("pos", rng.normal(size=(2, 3)), trainable=False)
        tree.save(tmp_path / "a.jmae", {"epoch": 1})
        again = ParameterTree.load(tmp_path / "a.jmae")
        again.save(tmp_path / "b.jmae", {"epoch": 1})
        assert (tmp_path / "a.jmae").read_bytes() == (tmp_path / "b.jmae").read_bytes()
        assert not again["pos"].requires_grad


class TestCheckpointFormat:
    def test_header_layout(self, rng):
        blob = checkpoint.encode({"b": np.arange(3, dtype=np.int32), "a": rng.normal(size=(2, 2))}, {"k": 1})
        assert blob.startswith(b"JMAE1\n")
        arrays, meta = checkpoint.decode(blob)
        assert meta == {"k": 1}
        assert arrays["b"].dtype == np.int32 and list(arrays["b"]) == [0, 1, 2]

    def test_bad_magic(self):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.decode(b"NOPE")
