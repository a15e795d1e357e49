import math

import numpy as np
import pytest

import oracles
from pif import diffcore as dc
from pif.diffcore import DomainError, Parameter, Tensor
from pif.embed import Vocabulary
from pif.interaction import (
    ClassifierParams,
    GirParams,
    HirModel,
    LirParams,
    ModelConfig,
    NodeState,
    WordHead,
    attend,
    classify,
    combine_loss,
    gir_attend,
    gir_encode,
    gir_interactions,
    hir_forward,
    joint_loss,
    leaf_cell,
    lir_cell_constituency,
    lir_cell_dependency,
    lir_controller,
    lir_encode,
    predict,
    root_state,
    token_states,
    word_term,
)
from pif.treeio import DependencyTree, Example, Sentence, random_constituency_tree, random_dependency_tree


def _state(h, c=None):
    h = np.asarray(h, dtype=float)
    return NodeState(Tensor(h), Tensor(np.zeros_like(h) if c is None else c))


def _zero(params):
    for p in params.parameters():
        p.data[...] = 0.0
    return params


def _lir(kind, d_e=3, d_h=4, seed=0, scale=1.0):
    return LirParams(d_e, d_h, kind, np.random.default_rng(seed), init_scale=scale)


class TestController:
    def test_single_child(self):
        p = _lir("dependency")
        h = np.array([0.3, -0.2, 0.9, 0.1])
        out = lir_controller(Tensor(np.ones(3)), [_state(h)], p)
        np.testing.assert_allclose(out.data, h, atol=1e-15)

    def test_zero_alpha_is_mean(self):
        p = _lir("dependency")
        p.W_alpha.data[...] = 0.0
        hs = np.random.default_rng(1).normal(size=(3, 4))
        out = lir_controller(Tensor(np.ones(3)), [_state(h) for h in hs], p)
        np.testing.assert_allclose(out.data, hs.mean(axis=0), atol=1e-15)

    def test_hand_example(self):
        p = LirParams(2, 2, "dependency", np.random.default_rng(0))
        p.W_h.data[...] = np.eye(2)
        p.b_h.data[...] = 0.0
        p.W_alpha.data[...] = np.eye(2)
        out = lir_controller(Tensor([10.0, 0.0]), [_state([1, 0]), _state([0, 1])], p)
        np.testing.assert_allclose(out.data, [0.7311, 0.2689], atol=1e-3)

    def test_no_children(self):
        with pytest.raises(DomainError):
            lir_controller(Tensor(np.ones(3)), [], _lir("dependency"))


class TestDependencyCell:
    def test_all_zero(self):
        p = _zero(_lir("dependency"))
        cs = [np.array([0.2, -1.0, 0.5, 3.0]), np.array([1.0, 1.0, -2.0, 0.0])]
        kids = [_state(np.zeros(4), c) for c in cs]
        out = lir_cell_dependency(Tensor(np.ones(3)), Tensor(np.zeros(4)), kids, p)
        expected_c = 0.5 * (cs[0] + cs[1])
        np.testing.assert_allclose(out.c.data, expected_c, atol=1e-15)
        np.testing.assert_allclose(out.h.data, 0.5 * np.tanh(expected_c), atol=1e-15)

    def test_leaf_rule(self):
        p = _lir("dependency", seed=3)
        x = np.array([0.5, -0.4, 1.2])
        out = lir_cell_dependency(Tensor(x), None, [], p)
        i = oracles.sigmoid(p.U_i.data @ x + p.b_i.data)
        o = oracles.sigmoid(p.U_o.data @ x + p.b_o.data)
        u = np.tanh(p.U_u.data @ x + p.b_u.data)
        np.testing.assert_allclose(out.c.data, i * u, atol=1e-15)
        np.testing.assert_allclose(out.h.data, o * np.tanh(i * u), atol=1e-15)
        leaf = leaf_cell(Tensor(x), p)
        np.testing.assert_array_equal(leaf.c.data, out.c.data)

    @pytest.mark.parametrize("scale, strict", [(1.0, True), (5.0, False)])
    def test_bounded(self, scale, strict):
        # saturated cells round tanh to exactly +-1 in float64
        rng = np.random.default_rng(5)
        p = _lir("dependency", seed=5, scale=scale)
        for _ in range(50):
            kids = [_state(rng.uniform(-1, 1, 4), rng.normal(size=4) * 2 * scale) for _ in range(3)]
            x = Tensor(rng.normal(size=3) * 2 * scale)
            out = lir_cell_dependency(x, lir_controller(x, kids, p), kids, p)
            assert np.all(np.isfinite(out.c.data))
            bound = np.abs(out.h.data)
            assert np.all(bound < 1) if strict else np.all(bound <= 1)


class TestConstituencyCell:
    def test_no_word_input(self):
        p = _lir("constituency", seed=2)
        assert not hasattr(p, "U_f")
        assert p.W_i.shape == (4, 8) and p.W_h.shape == (4, 4)

    def test_symmetric_children(self):
        p = _lir("constituency", seed=4)
        h, c = np.array([0.1, 0.5, -0.3, 0.2]), np.array([1.0, -0.5, 0.2, 0.0])
        out = lir_cell_constituency(_state(h, c), _state(h, c), p)
        P = {k: v.data for k, v in p.named_parameters()}
        htil = np.concatenate([h, h])
        i = oracles.sigmoid(P["W_i"] @ htil + P["b_i"])
        u = np.tanh(P["W_u"] @ htil + P["b_u"])
        f = oracles.sigmoid(P["W_f"] @ h + P["b_f"])
        np.testing.assert_allclose(out.c.data, i * u + 2 * f * c, atol=1e-14)

    def test_two_leaf_oracle(self):
        rng = np.random.default_rng(9)
        p = _lir("constituency", seed=9)
        tree = random_constituency_tree(2, rng)
        X, leaf_h = rng.normal(size=(2, 3)), rng.uniform(-1, 1, (2, 4))
        states = lir_encode(tree, [Tensor(x) for x in X], [Tensor(h) for h in leaf_h], p)
        (h, c), _ = oracles.constituency_lir(tree, X, leaf_h, p)
        root = states[3]
        assert np.max(np.abs(root.h.data - h)) < 1e-10 and np.max(np.abs(root.c.data - c)) < 1e-10


class TestLirEncode:
    def test_single_token(self):
        p = _lir("dependency")
        states = lir_encode(DependencyTree((0,)), [Tensor(np.ones(3))], [Tensor(np.full(4, 0.2))], p)
        assert list(states) == [1]
        np.testing.assert_array_equal(states[1].h.data, np.full(4, 0.2))

    def test_chain_gradient_reaches_every_token(self):
        p = _lir("dependency", seed=1)
        tree = DependencyTree((2, 3, 0))
        E = Parameter(np.random.default_rng(0).normal(size=(3, 3)))
        leaf_h = [Tensor(np.zeros(4))] * 3
        with dc.Tape() as tape:
            states = lir_encode(tree, [E[t] for t in range(3)], leaf_h, p)
            loss = dc.sum_(root_state(tree, states))
        dc.backward(loss, tape)
        assert len(states) == 3
        assert all(np.any(E.grad[t] != 0) for t in range(3))

    def test_pure(self):
        rng = np.random.default_rng(2)
        p = _lir("constituency", seed=2)
        tree = random_constituency_tree(5, rng)
        X = [Tensor(x) for x in rng.normal(size=(5, 3))]
        H = [Tensor(h) for h in rng.uniform(-1, 1, (5, 4))]
        a, b = lir_encode(tree, X, H, p), lir_encode(tree, X, H, p)
        assert all(np.array_equal(a[k].h.data, b[k].h.data) for k in a)

    def test_token_mismatch(self):
        with pytest.raises(DomainError):
            lir_encode(DependencyTree((2, 0)), [Tensor(np.ones(3))], [Tensor(np.ones(4))], _lir("dependency"))

    def test_kind_mismatch(self):
        tree = random_constituency_tree(2, np.random.default_rng(0))
        with pytest.raises(DomainError):
            lir_encode(tree, [Tensor(np.ones(3))] * 2, [Tensor(np.ones(4))] * 2, _lir("dependency"))

    @pytest.mark.parametrize("kind", ["dependency", "constituency"])
    def test_matches_oracle(self, kind):
        rng = np.random.default_rng(11)
        for trial in range(20):
            n, d_e, d_h = int(rng.integers(1, 7)), int(rng.integers(1, 6)), int(rng.integers(1, 9))
            p = LirParams(d_e, d_h, kind, rng, init_scale=1.0)
            X, leaf_h = rng.normal(size=(n, d_e)), rng.uniform(-1, 1, (n, d_h))
            make = random_dependency_tree if kind == "dependency" else random_constituency_tree
            tree = make(n, rng)
            states = lir_encode(tree, [Tensor(x) for x in X], [Tensor(h) for h in leaf_h], p)
            tokens = np.stack([t.data for t in token_states(tree, states, n)])
            if kind == "dependency":
                ref = oracles.dependency_lir(list(tree.heads), X, leaf_h, p)
                expected = np.stack([ref[t][0] for t in range(1, n + 1)])
            else:
                _, token_h = oracles.constituency_lir(tree, X, leaf_h, p)
                expected = np.stack(token_h)
            assert np.max(np.abs(tokens - expected)) < 1e-10


class TestGir:
    def test_single_word(self):
        h = Tensor([0.4, -0.1])
        assert gir_attend([h], 0, GirParams(2, np.random.default_rng(0))) is h
        np.testing.assert_array_equal(gir_encode([h], GirParams(2, np.random.default_rng(0))).data, h.data)

    def test_zero_weights_mean_of_others(self):
        g = _zero(GirParams(3, np.random.default_rng(0)))
        H = [Tensor(v) for v in np.random.default_rng(1).normal(size=(3, 3))]
        out = gir_attend(H, 0, g)
        np.testing.assert_allclose(out.data, (H[1].data + H[2].data) / 2, atol=1e-15)

    def test_hand_example(self):
        g = GirParams(2, np.random.default_rng(0))
        g.W_alpha_g.data[...] = np.eye(2)
        out = gir_attend([Tensor([1.0, 0.0]), Tensor([0.0, 1.0])], 0, g)
        np.testing.assert_array_equal(out.data, [0.0, 1.0])

    def test_identical_rows(self):
        g = GirParams(3, np.random.default_rng(2), init_scale=1.0)
        v = np.array([0.3, -0.7, 0.1])
        np.testing.assert_allclose(gir_encode([Tensor(v)] * 4, g).data, v, atol=1e-15)

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            gir_attend([Tensor([1.0])], 1, GirParams(1, np.random.default_rng(0)))

    @pytest.mark.parametrize("include_self", [False, True])
    def test_matches_brute_force(self, include_self):
        rng = np.random.default_rng(4)
        g = GirParams(3, rng, init_scale=1.0)
        H = rng.normal(size=(4, 3))
        R, s = oracles.gir(H, g.W_alpha_g.data, include_self)
        rows, _ = gir_interactions(Tensor(H), g, include_self)
        assert np.max(np.abs(rows.data - R)) < 1e-10
        assert np.max(np.abs(gir_encode(Tensor(H), g, include_self).data - s)) < 1e-10
        single = np.stack([gir_attend([Tensor(h) for h in H], k, g, include_self).data for k in range(4)])
        assert np.max(np.abs(single - R)) < 1e-10

    def test_permutation_covariance(self):
        rng = np.random.default_rng(8)
        g = GirParams(5, rng, init_scale=1.0)
        for _ in range(20):
            n = int(rng.integers(2, 8))
            H = rng.normal(size=(n, 5))
            perm = rng.permutation(n)
            R, _ = gir_interactions(Tensor(H), g)
            Rp, _ = gir_interactions(Tensor(H[perm]), g)
            np.testing.assert_allclose(Rp.data, R.data[perm], atol=1e-12)
            np.testing.assert_allclose(gir_encode(Tensor(H[perm]), g).data, gir_encode(Tensor(H), g).data, atol=1e-12)

    def test_self_logit_masked(self):
        rng = np.random.default_rng(3)
        _, weights = gir_interactions(Tensor(rng.normal(size=(5, 4))), GirParams(4, rng, init_scale=1.0))
        assert np.all(np.diag(weights.data) == 0)
        np.testing.assert_allclose(weights.data.sum(axis=1), 1.0, atol=1e-12)


def test_attention_weights_normalized():
    rng = np.random.default_rng(6)
    for _ in range(200):
        k, d = int(rng.integers(1, 8)), int(rng.integers(1, 6))
        _, w = attend(Tensor(rng.normal(size=d) * 3), Tensor(rng.normal(size=(k, d)) * 3), Tensor(rng.normal(size=(d, d)) * 3))
        assert abs(w.data.sum() - 1) < 1e-12 and np.all(w.data >= 0)


class TestLoss:
    def _parts(self, seed=0, n=3, k=3):
        rng = np.random.default_rng(seed)
        clf = ClassifierParams(4, k, rng, hidden=5, init_scale=1.0)
        head = WordHead(4, k, rng, init_scale=1.0)
        return Tensor(rng.normal(size=(n, 4))), Tensor(rng.normal(size=4)), clf, head

    def test_gamma_boundaries_exact(self):
        H, s, clf, head = self._parts()
        word = word_term(H, 1, head).item()
        sent = dc.cross_entropy(classify(s, clf), 1).item()
        assert joint_loss(H, s, 1, clf, head, 1.0).item() == word
        assert joint_loss(H, s, 1, clf, head, 0.0).item() == sent

    def test_hand_value(self):
        word = dc.cross_entropy(Tensor([[0.5, 0.5], [0.25, 0.75]]), 0)
        sent = dc.cross_entropy(Tensor([0.5, 0.5]), 0)
        value = combine_loss(word, sent, 0.5).item()
        assert value == pytest.approx(0.5 * (math.log(2) + math.log(4)) / 2 + 0.5 * math.log(2), abs=1e-12)
        assert value == pytest.approx(0.8664, abs=1e-4)

    @pytest.mark.parametrize("gamma", [-0.1, 1.5, float("nan")])
    def test_gamma_domain(self, gamma):
        H, s, clf, head = self._parts()
        with pytest.raises(DomainError):
            joint_loss(H, s, 0, clf, head, gamma)

    def test_label_out_of_range(self):
        H, s, clf, head = self._parts()
        with pytest.raises(DomainError):
            joint_loss(H, s, 3, clf, head, 0.5)


class TestPredict:
    def test_argmax(self):
        assert predict([0.1, 0.9]) == 1

    def test_tie_lowest(self):
        assert predict([0.5, 0.5]) == 0
        assert predict([0.2, 0.4, 0.4]) == 1

    def test_shift_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            logits = rng.normal(size=4)
            a = dc.softmax(Tensor(logits))
            b = dc.softmax(Tensor(logits + rng.normal() * 10))
            assert predict(a) == predict(b)


class TestClassifier:
    def test_probs_sum_to_one(self):
        rng = np.random.default_rng(1)
        clf = ClassifierParams(6, 4, rng)
        for batch in (1, 5):
            p = classify(Tensor(rng.normal(size=(batch, 6))), clf, training=True, rng=rng, dropout=0.4).data
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_batch_statistics_gradients(self):
        rng = np.random.default_rng(2)
        clf = ClassifierParams(4, 3, rng, hidden=5, init_scale=1.0)
        clf.bn_gain.data[...] = rng.uniform(0.5, 1.5, 5)
        clf.bn_bias.data[...] = rng.uniform(-0.5, 0.5, 5)
        X = Parameter(rng.normal(size=(3, 4)), name="inputs")
        labels = [0, 2, 1]

        def loss():
            return dc.cross_entropy(classify(X, clf, training=True), labels)

        assert dc.grad_check(loss, [X, *clf.parameters()]) < 1e-4

    def test_running_statistics_update(self):
        rng = np.random.default_rng(3)
        clf = ClassifierParams(4, 2, rng, hidden=3, momentum=0.9)
        X = rng.normal(size=(8, 4))
        classify(Tensor(X), clf, training=True)
        z = X @ clf.W1.data.T + clf.b1.data
        np.testing.assert_allclose(clf.running_mean, 0.1 * z.mean(axis=0), atol=1e-14)
        np.testing.assert_allclose(clf.running_var, 0.9 + 0.1 * z.var(axis=0), atol=1e-14)


def _model(mode, kind="dependency", seed=0):
    vocab = Vocabulary(["aa", "bb", "cc", "dd"])
    config = ModelConfig(d_e=6, d_h=4, hidden=5, n_classes=3, mode=mode, tree_kind=kind, init_scale=0.5)
    return HirModel(config, vocab, np.random.default_rng(seed))


def _example(tree=True):
    sent = Sentence(("aa", "bb", "cc", "dd"), 1, 11)
    return Example(sent, DependencyTree((2, 0, 2, 3)) if tree else None)


class TestHirForward:
    def test_gir_mode_without_tree(self):
        _, s, probs = hir_forward(_example(tree=False), _model("gir"))
        assert s.shape == (4,) and abs(probs.data.sum() - 1) < 1e-12

    def test_tree_required_for_lir(self):
        with pytest.raises(DomainError):
            hir_forward(_example(tree=False), _model("lir"))

    def test_hir_differs_from_lir(self):
        _, s_h, _ = hir_forward(_example(), _model("hir"))
        _, s_l, _ = hir_forward(_example(), _model("lir"))
        assert not np.allclose(s_h.data, s_l.data)

    @pytest.mark.parametrize("mode", ["lir", "gir", "hir"])
    def test_probs_normalized(self, mode):
        _, _, probs = hir_forward(_example(), _model(mode))
        assert abs(probs.data.sum() - 1) < 1e-12

    def test_root_readout(self):
        model = _model("lir")
        model.config.readout = "root"
        words, s, _ = hir_forward(_example(), model)
        np.testing.assert_array_equal(s.data, words.data[1])

    def test_groups_cover_parameters(self):
        model = _model("hir", "constituency")
        names = [p.name for p in model.parameters()]
        assert len(names) == len(set(names))
        assert list(model.groups()) == ["embeddings", "bilstm", "lir", "gir", "classifier"]

    def test_bad_config(self):
        with pytest.raises(DomainError):
            ModelConfig(mode="both")
        with pytest.raises(DomainError):
            ModelConfig(d_h=5)
