"""Weighting-head contracts: fixed/learnable/meta variants and combination."""

import numpy as np
import pytest

from regionmatch.backbone import FeatureMap
from regionmatch.matching import RegionScores
from regionmatch.tensor import ShapeError, Tensor, backward, tsum
from regionmatch.weighting import (
    FixedHead,
    LearnableHead,
    LearnableWeight,
    MetaHead,
    MetaLearnerConfig,
    MetaWeightNet,
    build_head,
    combine,
    fixed_weight,
    meta_weight,
)

from oracles import assert_grads_close, central_difference, meta_weight_loops


def fm(arr):
    return FeatureMap(values=Tensor(np.asarray(arr, dtype=np.float64)))


class TestFixedWeight:
    def test_5x5_values(self):
        w = fixed_weight(5, 5)
        assert w.values.shape == (25,)
        np.testing.assert_allclose(w.values.data, 0.04)

    def test_1x1(self):
        np.testing.assert_allclose(fixed_weight(1, 1).values.data, [1.0])

    def test_combine_equals_mean(self, rng):
        scores = RegionScores(values=Tensor(rng.normal(size=12)))
        got = combine(fixed_weight(3, 4), scores)
        assert got.item() == pytest.approx(scores.values.data.mean(), abs=1e-7)

    def test_rejects_degenerate_grid(self):
        with pytest.raises(ValueError):
            fixed_weight(0, 3)


class TestLearnableWeight:
    def test_zero_raw_gives_ln2(self):
        lw = LearnableWeight(6)
        np.testing.assert_allclose(lw().values.data, np.log(2.0), rtol=1e-6)

    def test_always_positive(self, rng):
        lw = LearnableWeight(10, dtype=np.float64)
        lw.raw.data = rng.normal(scale=5.0, size=10)
        assert np.all(lw().values.data > 0)

    def test_gradient_matches_finite_differences(self, rng):
        raw = rng.normal(size=(5,))
        target = rng.normal(size=(5,))

        lw = LearnableWeight(5, dtype=np.float64)
        lw.raw.data = raw.copy()
        backward(tsum(lw().values * Tensor(target)))

        def forward():
            fresh = LearnableWeight(5, dtype=np.float64)
            fresh.raw.data = raw
            return float(tsum(fresh().values * Tensor(target)).data)

        numeric = central_difference(forward, [raw])
        assert_grads_close([lw.raw.grad], numeric, label="learnable")


class TestCombine:
    def test_one_hot_selects(self, rng):
        scores = rng.normal(size=4)
        for i in range(4):
            w = np.zeros(4)
            w[i] = 1.0
            got = combine(
                WeightStub(w), RegionScores(values=Tensor(scores))
            )
            assert got.item() == pytest.approx(scores[i], abs=1e-7)

    def test_uniform_on_ones(self):
        got = combine(fixed_weight(5, 5), RegionScores(values=Tensor(np.ones(25))))
        assert got.item() == pytest.approx(1.0, abs=1e-7)

    def test_hand_arithmetic(self):
        got = combine(
            WeightStub([0.2, 0.8]), RegionScores(values=Tensor([0.5, 0.25]))
        )
        assert got.item() == pytest.approx(0.30, abs=1e-7)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            combine(WeightStub([0.5, 0.5]), RegionScores(values=Tensor([1.0, 2.0, 3.0])))

    def test_linearity_in_scores(self, rng):
        w = WeightStub(rng.uniform(size=6))
        p1, p2 = rng.normal(size=6), rng.normal(size=6)
        alpha, beta = 1.7, -0.4
        lhs = combine(w, RegionScores(values=Tensor(alpha * p1 + beta * p2))).item()
        rhs = alpha * combine(w, RegionScores(values=Tensor(p1))).item() + beta * combine(
            w, RegionScores(values=Tensor(p2))
        ).item()
        assert lhs == pytest.approx(rhs, abs=1e-6)

    def test_attribution_completeness(self, rng):
        w = rng.uniform(size=9)
        p = rng.normal(size=9)
        total = combine(WeightStub(w), RegionScores(values=Tensor(p))).item()
        assert total == pytest.approx(float(np.sum(w * p)), abs=1e-9)


class TestMetaWeight:
    def _net(self, rng, channels=4, hidden=6):
        return MetaWeightNet(
            MetaLearnerConfig(in_channels=2 * channels, hidden_channels=hidden),
            rng=rng, dtype=np.float64,
        )

    def test_zeroed_final_conv_gives_zero_weight(self, rng):
        net = self._net(rng)
        net.conv2.weight.data[:] = 0.0
        net.conv2.bias.data[:] = 0.0
        net.norm2.beta.data[:] = 0.0
        net.eval()
        w = meta_weight(fm(np.random.rand(4, 2, 2)), fm(np.random.rand(4, 2, 2)), net)
        np.testing.assert_allclose(w.values.data, 0.0, atol=1e-12)

    def test_nonnegative_outputs(self, rng):
        net = self._net(rng).eval()
        for _ in range(5):
            w = meta_weight(
                fm(rng.normal(size=(4, 3, 3))), fm(rng.normal(size=(4, 3, 3))), net
            )
            assert np.all(w.values.data >= 0)

    def test_order_sensitivity(self, rng):
        net = self._net(rng).eval()
        a, b = rng.normal(size=(4, 2, 2)), rng.normal(size=(4, 2, 2))
        w_ab = meta_weight(fm(a), fm(b), net).values.data
        w_ba = meta_weight(fm(b), fm(a), net).values.data
        assert not np.allclose(w_ab, w_ba)

    def test_task_sensitivity(self, rng):
        net = self._net(rng).eval()
        a = rng.normal(size=(4, 2, 2))
        w1 = meta_weight(fm(a), fm(rng.normal(size=(4, 2, 2))), net).values.data
        w2 = meta_weight(fm(a), fm(rng.normal(size=(4, 2, 2))), net).values.data
        assert not np.allclose(w1, w2)

    def test_channel_mismatch_rejected(self, rng):
        net = self._net(rng)
        with pytest.raises(ShapeError):
            meta_weight(fm(rng.normal(size=(3, 2, 2))), fm(rng.normal(size=(3, 2, 2))), net)

    def test_matches_per_cell_oracle(self, rng):
        # eval-mode net: per-cell affine + frozen batchnorm + relu, twice over
        net = self._net(rng, channels=4, hidden=6)
        net.norm1.running_mean[:] = rng.normal(size=6) * 0.1
        net.norm1.running_var[:] = rng.uniform(0.5, 1.5, size=6)
        net.norm2.running_mean[:] = rng.normal(size=1) * 0.1
        net.norm2.running_var[:] = rng.uniform(0.5, 1.5, size=1)
        net.eval()
        support, query = rng.normal(size=(4, 2, 2)), rng.normal(size=(4, 2, 2))
        got = meta_weight(fm(support), fm(query), net).values.data

        pair = np.concatenate([support, query], axis=0)
        want = meta_weight_loops(
            pair,
            net.conv1.weight.data.reshape(6, 8), net.conv1.bias.data,
            net.conv2.weight.data.reshape(1, 6), net.conv2.bias.data,
            bn1=(net.norm1.running_mean, net.norm1.running_var,
                 net.norm1.gamma.data, net.norm1.beta.data, net.norm1.eps),
            bn2=(net.norm2.running_mean, net.norm2.running_var,
                 net.norm2.gamma.data, net.norm2.beta.data, net.norm2.eps),
        )
        np.testing.assert_allclose(got, want, atol=1e-6)


class TestBatchedHeads:
    def test_fixed_head_constant(self, rng):
        head = FixedHead(4)
        w = head(Tensor(rng.normal(size=(2, 3, 2, 2))), Tensor(rng.normal(size=(5, 3, 2, 2))))
        assert w.shape == (2, 5, 4)
        np.testing.assert_allclose(w.data, 0.25)
        assert head.parameters() == []

    def test_learnable_head_broadcasts(self, rng):
        head = LearnableHead(4, dtype=np.float64)
        w = head(Tensor(rng.normal(size=(2, 3, 2, 2))), Tensor(rng.normal(size=(3, 3, 2, 2))))
        assert w.shape == (1, 1, 4)
        assert len(head.parameters()) == 1

    def test_meta_head_agrees_with_per_pair(self, rng):
        head = MetaHead(channels=4, hidden=6, rng=rng, dtype=np.float64)
        head.eval()
        sup = rng.normal(size=(2, 4, 2, 2))
        qry = rng.normal(size=(3, 4, 2, 2))
        batched = head(Tensor(sup), Tensor(qry))
        assert batched.shape == (2, 3, 4)
        for i in range(2):
            for j in range(3):
                single = meta_weight(fm(sup[i]), fm(qry[j]), head.net).values.data
                np.testing.assert_allclose(batched.data[i, j], single, atol=1e-10)

    def test_build_head_kinds(self, rng):
        assert build_head("fixed", 8, 4).kind == "fixed"
        assert build_head("learnable", 8, 4).kind == "learnable"
        assert build_head("meta", 8, 4, rng=rng).kind == "meta"
        with pytest.raises(ValueError):
            build_head("attention", 8, 4)


def WeightStub(values):
    from regionmatch.weighting import RegionWeight

    return RegionWeight(values=Tensor(np.asarray(values, dtype=np.float64)), kind="fixed")
