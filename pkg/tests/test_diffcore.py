import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pif import diffcore as dc
from pif.diffcore import DimensionError, DomainError, Parameter, Tensor

from oracles import matmul_loops

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def grads_of(loss_fn, params):
    dc.zero_grad(params)
    with dc.Tape() as tape:
        loss = loss_fn()
    dc.backward(loss, tape)
    return [p.grad.copy() for p in params]


class TestMatmul:
    def test_identity(self):
        out = dc.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
        assert out.data.tolist() == [[3], [4]]

    def test_row_times_column(self):
        assert dc.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(dc.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            dc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(0)
        a, b = Parameter(rng.normal(size=(2, 3))), Parameter(rng.normal(size=(3, 4)))
        ga, gb = grads_of(lambda: dc.sum_(dc.matmul(a, b)), [a, b])
        np.testing.assert_allclose(ga, np.ones((2, 4)) @ b.data.T)
        np.testing.assert_allclose(gb, a.data.T @ np.ones((2, 4)))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(dc.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_ln2(self):
        np.testing.assert_allclose(dc.softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)

    def test_large_logit_no_overflow(self):
        out = dc.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-300)

    def test_empty_is_domain_error(self):
        with pytest.raises(DomainError):
            dc.softmax(Tensor(np.zeros(0)))

    def test_mask_gives_exact_zero(self):
        out = dc.softmax(Tensor([1.0, 2.0, 3.0]), mask=np.array([False, True, False])).data
        assert out[1] == 0.0
        assert out.sum() == pytest.approx(1.0, abs=1e-15)

    def test_fully_masked_row_rejected(self):
        with pytest.raises(DomainError):
            dc.softmax(Tensor([1.0]), mask=np.array([True]))

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-700, 700)))
    def test_normalized_and_positive(self, v):
        out = dc.softmax(Tensor(v)).data
        assert abs(out.sum() - 1.0) < 1e-12
        assert np.all(out >= 0)
        # strictly positive whenever the spread keeps exp away from underflow
        if v.max() - v.min() < 700:
            assert np.all(out > 0)


class TestElementwise:
    def test_examples(self):
        assert dc.elementwise("tanh", Tensor([0.0])).data.tolist() == [0.0]
        assert dc.elementwise("sigmoid", Tensor([0.0])).data.tolist() == [0.5]
        assert dc.elementwise("mul", Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [3, 8]
        assert dc.elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [4, 6]

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dc.elementwise("mul", Tensor([1, 2]), Tensor([1, 2, 3]))

    def test_unknown_op(self):
        with pytest.raises(DomainError):
            dc.elementwise("relu", Tensor([1.0]))

    def test_tanh_derivative(self):
        p = Parameter([0.3, -1.2])
        (g,) = grads_of(lambda: dc.sum_(dc.tanh(p)), [p])
        np.testing.assert_allclose(g, 1 - np.tanh(p.data) ** 2)

    def test_sigmoid_extremes_finite(self):
        out = dc.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert out.tolist() == [0.0, 1.0]


class TestConcat:
    def test_examples(self):
        assert dc.concat(Tensor([1.0]), Tensor([2.0, 3.0])).data.tolist() == [1, 2, 3]
        assert dc.concat(Tensor(np.zeros(0)), Tensor([5.0])).data.tolist() == [5]

    def test_gradient_splits(self):
        a, b = Parameter([1.0, 2.0]), Parameter([3.0])
        ga, gb = grads_of(lambda: dc.sum_(dc.concat(a, b)), [a, b])
        assert ga.tolist() == [1.0, 1.0] and gb.tolist() == [1.0]

    def test_non_vector(self):
        with pytest.raises(DimensionError):
            dc.concat(Tensor(np.zeros((2, 2))), Tensor([1.0]))


class TestMaxpool:
    def test_examples(self):
        assert dc.maxpool_rows([Tensor([1, 4]), Tensor([3, 2])]).data.tolist() == [3, 4]
        assert dc.maxpool_rows([Tensor([7, -1])]).data.tolist() == [7, -1]

    def test_tie_goes_to_lowest_row(self):
        r0, r1 = Parameter([2.0, 0.0]), Parameter([2.0, 5.0])
        g0, g1 = grads_of(lambda: dc.index(dc.maxpool_rows([r0, r1]), 0), [r0, r1])
        assert g0.tolist() == [1.0, 0.0] and g1.tolist() == [0.0, 0.0]

    def test_empty(self):
        with pytest.raises(DomainError):
            dc.maxpool_rows([])

    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=finite))
    def test_dominates_and_attains(self, m):
        out = dc.maxpool_rows(Tensor(m)).data
        assert np.all(out[None, :] >= m)
        assert np.all(np.any(m == out[None, :], axis=0))


class TestCrossEntropy:
    def test_examples(self):
        assert dc.cross_entropy(Tensor([1.0, 0.0]), 0).item() == 0.0
        assert dc.cross_entropy(Tensor([0.5, 0.5]), 1).item() == pytest.approx(math.log(2))
        assert dc.cross_entropy(Tensor([0.25, 0.75]), 0).item() == pytest.approx(math.log(4))

    def test_clamp(self):
        assert dc.cross_entropy(Tensor([1.0, 0.0]), 1).item() == pytest.approx(-math.log(1e-12))

    def test_label_range(self):
        with pytest.raises(DomainError):
            dc.cross_entropy(Tensor([0.5, 0.5]), 2)
        with pytest.raises(DomainError):
            dc.cross_entropy(Tensor([0.5, 0.5]), -1)

    def test_matrix_is_row_mean(self):
        p = Tensor([[0.5, 0.5], [0.25, 0.75]])
        assert dc.cross_entropy(p, 0).item() == pytest.approx((math.log(2) + math.log(4)) / 2)


class TestBackward:
    def test_square(self):
        w = Parameter([1.0, 2.0])
        (g,) = grads_of(lambda: dc.sum_(w * w), [w])
        assert g.tolist() == [2.0, 4.0]

    def test_unrelated_parameter_zero(self):
        w, p = Parameter([1.0]), Parameter([5.0])
        _, gp = grads_of(lambda: dc.sum_(w * w), [w, p])
        assert gp.tolist() == [0.0]

    def test_non_scalar(self):
        w = Parameter([1.0, 2.0])
        with dc.Tape() as tape:
            out = w * w
        with pytest.raises(DomainError):
            dc.backward(out, tape)

    def test_replay_doubles(self):
        w = Parameter([0.5, -1.5])
        with dc.Tape() as tape:
            loss = dc.sum_(dc.tanh(w) * w)
        dc.backward(loss, tape)
        once = w.grad.copy()
        dc.backward(loss, tape)
        np.testing.assert_array_equal(w.grad, 2 * once)

    def test_no_grad_records_nothing(self):
        w = Parameter([1.0])
        with dc.Tape() as tape:
            with dc.no_grad():
                _ = w * w
        assert tape.records == []

    def test_tape_visits_each_record_once(self):
        calls = []
        w = Parameter([1.0, 2.0])
        with dc.Tape() as tape:
            loss = dc.sum_(dc.exp(w) + w)
        for rec in tape.records:
            inner = rec.vjp

            def counted(g, inner=inner, rec=rec):
                calls.append(id(rec))
                return inner(g)

            rec.vjp = counted
        dc.backward(loss, tape)
        assert sorted(calls) == sorted(id(r) for r in tape.records)


class TestGradCheck:
    def test_sum_exact(self):
        p = Parameter(np.random.default_rng(0).normal(size=5))
        # both gradients are 1; only the rounding of f(x+eps) - f(x-eps) remains
        assert dc.grad_check(lambda: dc.sum_(p), [p]) < 1e-10

    def test_tanh_at_zero(self):
        p = Parameter([0.0])
        assert dc.grad_check(lambda: dc.sum_(dc.tanh(p)), [p]) < 1e-8

    def test_restores_existing_grads(self):
        p = Parameter([1.0, 2.0])
        p.grad[...] = [7.0, 8.0]
        dc.grad_check(lambda: dc.sum_(p * p), [p])
        assert p.grad.tolist() == [7.0, 8.0]

    def test_detects_wrong_gradient(self):
        p = Parameter([0.7])

        def f():
            # value of p**3 but a deliberately wrong derivative (2p)
            return dc._result(p.data**3, (p,), lambda g: (2 * p.data * g,))

        # analytic 1.4 vs true 1.47
        assert dc.grad_check(lambda: dc.sum_(f()), [p]) > 0.01

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 50), st.integers(1, 50), st.integers(0, 2**31))
    def test_composite(self, n, m, seed):
        rng = np.random.default_rng(seed)
        a = Parameter(rng.uniform(-1, 1, n))
        # fan-in scaling keeps tanh out of saturation, where gradients near
        # 1e-8 fall below the central-difference rounding floor
        W = Parameter(rng.uniform(-1, 1, (m, n)) / math.sqrt(n))
        b = Parameter(rng.uniform(-1, 1, m))

        def f():
            h = dc.tanh(dc.matmul(W, a) + b)
            p = dc.softmax(dc.sigmoid(h) * h)
            return dc.cross_entropy(p, 0) + dc.sum_(dc.exp(dc.scale(h, 0.1))) / float(m)

        assert dc.grad_check(f, [a, W, b]) < 1e-4

    def test_mixtures(self):
        p = Parameter([0.3, -0.4])
        errs = dc.grad_check_mixtures(lambda: (dc.sum_(p * p), dc.sum_(dc.tanh(p))), [p], [(1.0, 0.0), (0.5, 0.5), (0.0, 1.0)])
        assert max(errs) < 1e-8


class TestClip:
    def _params(self, values):
        ps = [Parameter(np.zeros_like(np.asarray(v, float))) for v in values]
        for p, v in zip(ps, values):
            p.grad[...] = v
        return ps

    def test_scales_down(self):
        ps = self._params([[6.0, 8.0]])
        assert dc.clip_global_norm(ps, 5.0) == 0.5
        assert dc.global_norm(ps) == pytest.approx(5.0)

    def test_below_threshold_unchanged(self):
        ps = self._params([[3.0], [0.0]])
        assert dc.clip_global_norm(ps, 5.0) == 1.0
        assert ps[0].grad.tolist() == [3.0]

    def test_zero_norm(self):
        assert dc.clip_global_norm(self._params([[0.0, 0.0]]), 5.0) == 1.0

    def test_bad_threshold(self):
        with pytest.raises(DomainError):
            dc.clip_global_norm([], 0.0)

    @given(st.lists(arrays(np.float64, st.integers(1, 8), elements=st.floats(-100, 100)), min_size=1, max_size=4))
    def test_idempotent(self, values):
        ps = self._params(values)
        dc.clip_global_norm(ps, 5.0)
        once = [p.grad.copy() for p in ps]
        dc.clip_global_norm(ps, 5.0)
        for a, p in zip(once, ps):
            np.testing.assert_allclose(p.grad, a, rtol=1e-12, atol=1e-300)
        assert dc.global_norm(ps) <= 5.0 + 1e-9


class TestDropout:
    def test_identity_cases(self):
        t = Tensor(np.ones(10))
        assert dc.dropout(t, 0.0, True, np.random.default_rng(0)) is t
        assert dc.dropout(t, 0.4, False, None) is t

    def test_rejects_rate_one(self):
        with pytest.raises(DomainError):
            dc.dropout(Tensor([1.0]), 1.0, True, np.random.default_rng(0))

    def test_mean_preserved(self):
        out = dc.dropout(Tensor(np.ones(100_000)), 0.5, True, np.random.default_rng(7)).data
        assert 0.98 <= out.mean() <= 1.02
        assert set(np.unique(out)) <= {0.0, 2.0}


def test_item_requires_single_element():
    with pytest.raises(DomainError):
        Tensor([1.0, 2.0]).item()


def test_broadcast_add_gradient_unbroadcasts():
    m, b = Parameter(np.ones((3, 2))), Parameter([1.0, 2.0])
    _, gb = grads_of(lambda: dc.sum_(m + b), [m, b])
    assert gb.tolist() == [3.0, 3.0]


def test_index_fancy_accumulates():
    w = Parameter(np.arange(6.0).reshape(3, 2))
    (g,) = grads_of(lambda: dc.sum_(dc.index(w, np.array([0, 0, 2]))), [w])
    assert g.tolist() == [[2, 2], [0, 0], [1, 1]]
