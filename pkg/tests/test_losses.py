import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proto_mp import autodiff as ad
from proto_mp.autodiff import Tape, Tensor, backward
from proto_mp.checks import random_graph
from proto_mp.layers import GraphOperators, P2Model
from proto_mp.losses import (LossWeights, alignment_loss, cross_entropy, diversity_loss, final_loss,
                             sparsity_loss)


def T(x, grad=False):
    return Tensor(np.atleast_2d(np.asarray(x, dtype=float)), requires_grad=grad)


def scalar(t):
    return float(t.data[0, 0])


class TestCrossEntropy:
    def test_uniform(self):
        v = scalar(cross_entropy(T(np.zeros((3, 5))), np.array([0, 2, 4]), np.ones(3, bool)))
        assert abs(v - math.log(5)) < 1e-12

    def test_saturated(self):
        logits = np.zeros((2, 3))
        logits[0, 1] = logits[1, 2] = 50.0
        assert scalar(cross_entropy(T(logits), np.array([1, 2]), np.ones(2, bool))) < 1e-20

    def test_hand_value(self):
        v = scalar(cross_entropy(T([[1, 0]]), np.array([1]), np.array([True])))
        assert abs(v - math.log(1 + math.e)) < 1e-12

    def test_mask_selects(self):
        logits = T([[1, 0], [0, 5]])
        v = scalar(cross_entropy(logits, np.array([1, 0]), np.array([True, False])))
        assert abs(v - math.log(1 + math.e)) < 1e-12

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            cross_entropy(T([[1, 0]]), np.array([0]), np.array([False]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(2, 6), st.integers(0, 10_000))
    def test_nonnegative(self, n, C, seed):
        rng = np.random.default_rng(seed)
        logits = T(rng.normal(scale=10, size=(n, C)))
        assert scalar(cross_entropy(logits, rng.integers(0, C, n), np.ones(n, bool))) >= 0


class TestAlignment:
    def test_perfect(self):
        H = np.random.default_rng(0).normal(size=(6, 3))
        # the 1e-12 norm guard costs about 2e-12/|h| per row
        assert abs(scalar(alignment_loss(T(H), T(H))) + 6) < 1e-10

    def test_orthogonal(self):
        assert scalar(alignment_loss(T([[1, 0], [2, 0]]), T([[0, 1]]))) == 0.0

    def test_hand_value(self):
        v = scalar(alignment_loss(T([[1, 0], [1, 1]]), T([[1, 0]])))
        assert abs(v + 1 + 1 / math.sqrt(2)) < 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 10_000))
    def test_bounds(self, n, k, seed):
        rng = np.random.default_rng(seed)
        v = scalar(alignment_loss(T(rng.normal(size=(n, 3))), T(rng.normal(size=(k, 3)))))
        assert -n - 1e-12 <= v <= n + 1e-12


class TestDiversity:
    def test_single_cell(self):
        assert scalar(diversity_loss(T([[1.0, 2.0]]), T([[0.5, -1.0]]))) == 0.0

    def test_uniform(self):
        v = scalar(diversity_loss(T(np.zeros((2, 3))), T(np.ones((4, 3)))))
        assert abs(v + 2 * math.log(4)) < 1e-12

    def test_saturated(self):
        # each prototype has one sample with logit +50 over the rest
        P = T(np.eye(2) * 50)
        H = T([[1, 0], [0, 1], [0, 0], [0, 0]])
        assert abs(scalar(diversity_loss(P, H))) < 1e-15

    def test_uniform_is_minimum(self):
        rng = np.random.default_rng(1)
        k, n, d = 3, 5, 4
        uniform = scalar(diversity_loss(T(np.zeros((k, d))), T(rng.normal(size=(n, d)))))
        for _ in range(50):
            v = scalar(diversity_loss(T(rng.normal(size=(k, d))), T(rng.normal(size=(n, d)))))
            assert v >= uniform - 1e-12

    def test_prototype_axis(self):
        v = scalar(diversity_loss(T(np.zeros((2, 3))), T(np.ones((4, 3))), axis="prototypes"))
        assert abs(v + 4 * math.log(2)) < 1e-12


class TestSparsity:
    def test_zero(self):
        assert scalar(sparsity_loss(T(np.zeros((3, 2))))) == 0.0

    def test_hand_value(self):
        assert scalar(sparsity_loss(T([[1, -2]]))) == 8.0

    @given(st.floats(1.01, 10.0), st.integers(0, 1000))
    def test_monotone_in_scale(self, t, seed):
        P = np.random.default_rng(seed).normal(size=(2, 3))
        assert scalar(sparsity_loss(T(t * P))) > scalar(sparsity_loss(T(P)))


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0, 0)


class TestFinalLoss:
    def setup_method(self):
        rng = np.random.default_rng(2)
        self.g = random_graph(rng, n=12, d0=5, classes=3)
        self.model = P2Model("gcn", 5, 8, 3, num_pn=4, num_pa=4, features=self.g.features, seed=1)
        self.ops = GraphOperators.build(self.g, 4)
        self.mask = np.ones(12, bool)

    def forward(self):
        logits, trace = self.model.forward(self.g, self.ops)
        return cross_entropy(logits, self.g.labels, self.mask), trace

    def test_zero_weights_is_task(self):
        task, trace = self.forward()
        out = final_loss(task, self.model.bank, trace, self.g.X, LossWeights())
        assert out is task

    def test_disabled_mechanisms_is_task(self):
        m = P2Model("gcn", 5, 8, 3, features=self.g.features)
        logits, trace = m.forward(self.g, GraphOperators.build(self.g))
        task = cross_entropy(logits, self.g.labels, self.mask)
        out = final_loss(task, m.bank, trace, self.g.X, LossWeights(0.3, 0.2, 0.1))
        assert scalar(out) == scalar(task)

    def test_matches_straight_line(self):
        w = LossWeights(0.1, 0.2, 0.05)
        task, trace = self.forward()
        got = scalar(final_loss(task, self.model.bank, trace, self.g.X, w))

        def cos_max(H, P):
            Hn = H / (np.linalg.norm(H, axis=1, keepdims=True) + 1e-12)
            Pn = P / (np.linalg.norm(P, axis=1, keepdims=True) + 1e-12)
            return (Hn @ Pn.T).max(axis=1)

        def negent(P, H):
            Z = P @ H.T
            Z = Z - Z.max(axis=1, keepdims=True)
            logC = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
            return float((np.exp(logC) * logC).sum())

        def sp(P):
            return float((P ** 2).sum() + np.abs(P).sum())

        p_n = self.model.bank.p_n.data
        p_a = [p.data for p in self.model.bank.p_a]
        h_n = [lt.h_n.data for lt in trace.layers]
        expect = (scalar(task)
                  + w.alignment * sum(-cos_max(h, p).sum() for h, p in zip(h_n, p_a))
                  + w.diversity * (negent(p_n, self.g.X.data) + sum(negent(p, h) for h, p in zip(h_n, p_a)))
                  + w.sparsity * (sp(p_n) + sum(sp(p) for p in p_a)))
        assert abs(got - expect) < 1e-12 * max(1.0, abs(expect))

    @given(st.floats(0.0, 5.0))
    @settings(max_examples=20, deadline=None)
    def test_linear_in_weight_scale(self, t):
        w = LossWeights(0.1, 0.2, 0.05)
        task, trace = self.forward()
        base = scalar(final_loss(task, self.model.bank, trace, self.g.X, w)) - scalar(task)
        scaled = scalar(final_loss(task, self.model.bank, trace, self.g.X, w.scaled(t))) - scalar(task)
        assert abs(scaled - t * base) < 1e-10 * max(1.0, abs(t * base))

    def test_prototype_only_gradient(self):
        """With target_grad off, regularizers move the prototypes but not the backbone."""
        w = LossWeights(0.1, 0.2, 0.0)
        params = [p for _, p in self.model.named_parameters()]
        grads = {}
        for flag in (True, False):
            with Tape():
                task, trace = self.forward()
                reg = ad.sub(final_loss(task, self.model.bank, trace, self.g.X, w, target_grad=flag), task)
            grads[flag] = dict(zip([n for n, _ in self.model.named_parameters()], backward(reg, params)))
        assert np.all(grads[False]["layer1.w_base"] == 0)
        assert np.any(grads[True]["layer1.w_base"] != 0)
        # the last bank feeds no later h_n, so its gradient is unchanged
        assert np.array_equal(grads[False]["layer2.p_a"], grads[True]["layer2.p_a"])
