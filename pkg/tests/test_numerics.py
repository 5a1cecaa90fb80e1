import math

import numpy as np
import pytest

from diarkit import numerics as nm


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for q in range(k):
                s += a[i, q] * b[q, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity_left(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 3))
        out = nm.matmul(nm.tensor(np.eye(3)), nm.tensor(x))
        assert np.array_equal(out.data, x)

    def test_identity_right(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = nm.matmul(nm.tensor(a), nm.tensor(np.eye(2)))
        assert np.array_equal(out.data, a)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        out = nm.matmul(nm.tensor(a), nm.tensor(b))
        assert np.array_equal(out.data, triple_loop_matmul(a, b))

    def test_exact_on_all_small_shapes(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            m, k, n = rng.integers(1, 9, size=3)
            a = rng.standard_normal((m, k))
            b = rng.standard_normal((k, n))
            out = nm.matmul(nm.tensor(a), nm.tensor(b))
            assert np.array_equal(out.data, triple_loop_matmul(a, b))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(nm.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            nm.matmul(nm.tensor(np.zeros((2, 3))), nm.tensor(np.zeros((4, 2))))

    def test_batched_broadcast(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((5, 3, 4))
        b = rng.standard_normal((4, 2))
        out = nm.matmul(nm.tensor(a), nm.tensor(b))
        assert out.shape == (5, 3, 2)
        assert np.allclose(out.data, a @ b, atol=1e-13)


class TestSoftmax:
    def test_symmetry(self):
        out = nm.softmax(nm.tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal()
        c = rng.standard_normal()
        a = nm.softmax(nm.tensor([x, x + c]))
        b = nm.softmax(nm.tensor([0.0, c]))
        assert np.allclose(a.data, b.data, atol=1e-15)

    def test_matches_exp_normalize_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        out = nm.softmax(nm.tensor(x))
        assert np.abs(out.data - expected).max() < 1e-12

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = rng.standard_normal((6, 7)) * rng.uniform(0.1, 50)
            out = nm.softmax(nm.tensor(x), axis=-1)
            assert np.abs(out.data.sum(axis=-1) - 1.0).max() < 1e-12
            assert (out.data >= 0).all()


class TestLayerNorm:
    def test_zero_affine_gives_bitwise_zero(self):
        rng = np.random.default_rng(6)
        d = 8
        for _ in range(20):
            x = rng.standard_normal((4, d)) * rng.uniform(0.01, 100)
            out = nm.layer_norm(nm.tensor(x), nm.tensor(np.zeros(d)), nm.tensor(np.zeros(d)))
            assert (out.data == 0.0).all()

    def test_constant_vector(self):
        d = 5
        x = np.full((3, d), 2.7)
        out = nm.layer_norm(nm.tensor(x), nm.tensor(np.ones(d)), nm.tensor(np.zeros(d)))
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_standardizes_before_affine(self):
        rng = np.random.default_rng(7)
        d = 16
        x = rng.standard_normal((10, d)) * 3 + 1
        out = nm.layer_norm(nm.tensor(x), nm.tensor(np.ones(d)), nm.tensor(np.zeros(d)))
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-6
        assert np.abs(out.data.var(axis=-1) - 1.0).max() < 1e-4  # eps shifts variance slightly

    def test_eps_must_be_positive(self):
        with pytest.raises(nm.ConfigError):
            nm.layer_norm(nm.tensor(np.zeros((2, 2))), nm.tensor(np.ones(2)), nm.tensor(np.zeros(2)), eps=0.0)


class TestActivations:
    def test_prelu_piecewise(self):
        a = nm.tensor(np.array(0.25))
        out = nm.prelu(nm.tensor([2.0, -2.0]), a)
        assert np.array_equal(out.data, [2.0, -0.5])

    def test_prelu_unit_slope_is_identity(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(20)
        out = nm.prelu(nm.tensor(x), nm.tensor(np.array(1.0)))
        assert np.array_equal(out.data, x)

    def test_gelu_zero(self):
        assert nm.gelu(nm.tensor([0.0])).data[0] == 0.0

    def test_sigmoid_range_and_symmetry(self):
        x = np.linspace(-30, 30, 41)
        s = nm.sigmoid(nm.tensor(x)).data
        assert ((s > 0) & (s < 1)).all()
        assert np.allclose(s + s[::-1], 1.0, atol=1e-12)


def make_mha_params(rng, d_model, d_attn):
    def w(shape):
        return nm.tensor(rng.standard_normal(shape) * 0.3)

    return nm.MhaParams(
        wq=w((d_model, d_attn)), bq=w((d_attn,)),
        wk=w((d_model, d_attn)),
        wv=w((d_model, d_attn)), bv=w((d_attn,)),
        wo=w((d_attn, d_model)), bo=w((d_model,)),
    )


def mha_oracle(x, p, heads):
    """Per-head attention written as plain loops over heads."""
    d_attn = p.wq.data.shape[1]
    dh = d_attn // heads
    q = x @ p.wq.data + p.bq.data
    k = x @ p.wk.data
    v = x @ p.wv.data + p.bv.data
    n = x.shape[0]
    ctx = np.zeros((n, d_attn))
    weights = np.zeros((heads, n, n))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        w = e / e.sum(axis=1, keepdims=True)
        weights[h] = w
        ctx[:, sl] = w @ v[:, sl]
    return ctx @ p.wo.data + p.bo.data, weights


class TestMultiHeadAttention:
    def test_single_position(self):
        rng = np.random.default_rng(9)
        p = make_mha_params(rng, 4, 4)
        x = rng.standard_normal((1, 4))
        out, w = nm.multi_head_attention(nm.tensor(x), nm.tensor(x), p, 2)
        assert np.array_equal(w.data, np.ones((2, 1, 1)))
        expected = (x @ p.wv.data + p.bv.data) @ p.wo.data + p.bo.data
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_identical_rows_give_uniform_weights(self):
        rng = np.random.default_rng(10)
        p = make_mha_params(rng, 6, 6)
        row = rng.standard_normal(6)
        x = np.tile(row, (4, 1))
        _, w = nm.multi_head_attention(nm.tensor(x), nm.tensor(x), p, 3)
        assert np.allclose(w.data, 0.25, atol=1e-12)

    def test_matches_per_head_oracle(self):
        rng = np.random.default_rng(11)
        p = make_mha_params(rng, 4, 4)
        x = rng.standard_normal((3, 4))
        out, w = nm.multi_head_attention(nm.tensor(x), nm.tensor(x), p, 2)
        expected_out, expected_w = mha_oracle(x, p, 2)
        assert np.abs(out.data - expected_out).max() < 1e-10
        assert np.abs(w.data - expected_w).max() < 1e-10

    def test_weight_rows_sum_to_one(self):
        rng = np.random.default_rng(12)
        p = make_mha_params(rng, 8, 8)
        x = rng.standard_normal((5, 8))
        _, w = nm.multi_head_attention(nm.tensor(x), nm.tensor(x), p, 4)
        assert np.abs(w.data.sum(axis=-1) - 1.0).max() < 1e-12

    def test_head_divisibility(self):
        rng = np.random.default_rng(13)
        p = make_mha_params(rng, 4, 6)
        with pytest.raises(nm.ConfigError):
            nm.multi_head_attention(nm.tensor(np.zeros((2, 4))), nm.tensor(np.zeros((2, 4))), p, 4)


class TestCrossEntropy:
    def test_certain_prediction_has_zero_loss(self):
        logits = np.zeros((3, 4))
        logits[:, 1] = 200.0
        loss = nm.cross_entropy(nm.tensor(logits), np.array([1, 1, 1]))
        assert loss.item() == 0.0

    def test_uniform_logits(self):
        loss = nm.cross_entropy(nm.tensor(np.zeros((5, 7))), np.zeros(5, dtype=int))
        assert abs(loss.item() - math.log(7)) < 1e-12

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(14)
        logits = rng.standard_normal((6, 5)) * 3
        targets = rng.integers(0, 5, size=6)
        loss = nm.cross_entropy(nm.tensor(logits), targets)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected = -np.log(probs[np.arange(6), targets]).mean()
        assert abs(loss.item() - expected) < 1e-12

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            nm.cross_entropy(nm.tensor(np.zeros((2, 3))), np.array([0, 3]))


class TestFiniteChecks:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            nm.tensor([1.0, float("nan")])

    def test_rejects_inf_parameter(self):
        with pytest.raises(ValueError):
            nm.Parameter("p", [float("inf")])

    def test_toggle(self):
        nm.set_finite_checks(False)
        try:
            nm.tensor([float("nan")])
        finally:
            nm.set_finite_checks(True)


class TestGradCheck:
    def test_linear_function(self):
        rng = np.random.default_rng(15)
        x = nm.tensor(rng.standard_normal(6))
        err = nm.grad_check(lambda t: nm.sum_all(t), [x])
        assert err < 1e-9
        assert np.allclose(x.grad, 1.0)

    def test_cross_entropy_path(self):
        rng = np.random.default_rng(16)
        logits = nm.tensor(rng.standard_normal((4, 5)))
        targets = rng.integers(0, 5, size=4)
        err = nm.grad_check(lambda t: nm.cross_entropy(t, targets), [logits])
        assert err < 1e-6

    @pytest.mark.parametrize("seed", range(10))
    def test_every_primitive(self, seed):
        rng = np.random.default_rng(100 + seed)

        def t(*shape):
            return nm.tensor(rng.standard_normal(shape))

        a, b = t(3, 4), t(3, 4)
        checks = [
            (lambda x, y: nm.mean_all(nm.add(x, y)), [a, b]),
            (lambda x, y: nm.mean_all(nm.sub(x, y)), [t(3, 4), t(3, 4)]),
            (lambda x, y: nm.mean_all(nm.mul(x, y)), [t(3, 4), t(3, 4)]),
            (lambda x: nm.mean_all(nm.scale(x, -2.5)), [t(5)]),
            (lambda x, y: nm.mean_all(nm.matmul(x, y)), [t(3, 4), t(4, 2)]),
            (lambda x: nm.mean_all(nm.mul(nm.softmax(x, axis=-1), x)), [t(3, 5)]),
            (
                lambda x, g, be: nm.mean_all(nm.mul(nm.layer_norm(x, g, be), x)),
                [t(4, 6), t(6), t(6)],
            ),
            (
                lambda x, s: nm.mean_all(nm.prelu(x, s)),
                [nm.tensor(rng.standard_normal((4, 3)) + np.sign(rng.standard_normal((4, 3))) * 0.2),
                 nm.tensor(np.array(0.25))],
            ),
            (lambda x: nm.mean_all(nm.gelu(x)), [t(7)]),
            (lambda x: nm.mean_all(nm.sigmoid(x)), [t(7)]),
            (lambda x: nm.mean_all(nm.mul(nm.reshape(x, (6, 2)), nm.reshape(x, (6, 2)))), [t(3, 4)]),
            (lambda x: nm.mean_all(nm.mul(nm.transpose(x, (1, 0)), nm.transpose(x, (1, 0)))), [t(3, 4)]),
            (lambda x, y: nm.mean_all(nm.concat([x, y], axis=1)), [t(2, 3), t(2, 2)]),
            (lambda x: nm.mean_all(nm.narrow(x, 1, 1, 2)), [t(3, 4)]),
            (lambda x: nm.mean_all(nm.mul(nm.pad_axis(x, 0, 1, 2), nm.pad_axis(x, 0, 1, 2))), [t(3, 4)]),
            (lambda x: nm.mean_all(nm.mul(nm.broadcast_to(x, (5, 2, 3)), nm.broadcast_to(x, (5, 2, 3)))), [t(2, 3)]),
            (lambda x: nm.mean_all(nm.mul(nm.mean_axis(x, 0), nm.mean_axis(x, 0))), [t(4, 3)]),
        ]
        for f, inputs in checks:
            assert nm.grad_check(f, inputs) < 1e-6

    @pytest.mark.parametrize("seed", range(3))
    def test_attention_composition(self, seed):
        rng = np.random.default_rng(200 + seed)
        p = make_mha_params(rng, 4, 4)
        x = nm.tensor(rng.standard_normal((3, 4)))
        params = [p.wq, p.wk, p.wv, p.wo, p.bq, p.bv, p.bo]

        def f(*tensors):
            out, _ = nm.multi_head_attention(x, x, p, 2)
            return nm.mean_all(nm.mul(out, out))

        def f_input(inp):
            out, _ = nm.multi_head_attention(inp, inp, p, 2)
            return nm.mean_all(nm.mul(out, out))

        assert nm.grad_check(f, params) < 1e-6
        assert nm.grad_check(f_input, [x]) < 1e-6


class TestDeterminism:
    def test_repeated_backward_is_bit_identical(self):
        def run():
            rng = np.random.default_rng(17)
            x = nm.tensor(rng.standard_normal((6, 8)))
            w = nm.tensor(rng.standard_normal((8, 8)) * 0.2)
            g = nm.tensor(np.ones(8))
            bta = nm.tensor(np.zeros(8))
            h = nm.layer_norm(nm.matmul(x, w), g, bta)
            loss = nm.mean_all(nm.mul(nm.gelu(h), h))
            nm.backward(loss)
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)
