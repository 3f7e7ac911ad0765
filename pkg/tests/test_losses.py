import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsseg import losses, metrics
from dsseg.gradcheck import check_function
from dsseg.tensor import ShapeError, Tensor


def T(a, **kw):
    return Tensor(np.asarray(a, dtype=np.float64), **kw)


class TestSoftDice:
    def test_perfect_overlap_is_zero(self):
        g = np.zeros((4, 4, 4))
        g[1:3, 1:3, 1:3] = 1
        assert losses.soft_dice(T(g), g).item() == pytest.approx(0.0, abs=1e-6)

    def test_disjoint_is_one(self):
        s = np.zeros(8)
        s[:4] = 1
        g = np.zeros(8)
        g[4:] = 1
        assert losses.soft_dice(T(s), g).item() == pytest.approx(1.0, abs=1e-6)

    def test_half_overlap_analytic_third(self):
        # s = 0.5 everywhere, g = 1 on exactly half the voxels -> 1/3
        s = np.full(16, 0.5)
        g = np.zeros(16)
        g[:8] = 1
        assert losses.soft_dice(T(s), g).item() == pytest.approx(1 / 3, abs=1e-6)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            losses.soft_dice(T(np.zeros(4)), np.zeros(5))

    def test_symmetric_for_binary_masks(self):
        rng = np.random.default_rng(0)
        a = (rng.random(64) < 0.3).astype(float)
        b = (rng.random(64) < 0.3).astype(float)
        assert losses.soft_dice(T(a), b).item() == pytest.approx(
            losses.soft_dice(T(b), a).item(), abs=1e-9)

    def test_range_zero_one(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            s = rng.random(32)
            g = (rng.random(32) < 0.4).astype(float)
            v = losses.soft_dice(T(s), g).item()
            assert 0.0 <= v <= 1.0

    def test_matches_voxel_counter_dsc_for_binary(self):
        # 1 - soft_dice == 2TP/(2TP+FP+FN) from the metrics module
        rng = np.random.default_rng(2)
        pred = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
        gt = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
        soft = 1 - losses.soft_dice(T(pred.astype(float)), gt).item()
        hard = metrics.dsc(metrics.confusion(pred, gt))
        assert soft == pytest.approx(hard, abs=2 * losses.DEFAULT_EPSILON)


class TestPearsonLoss:
    def test_identical_one_hot_is_one(self):
        h = losses.one_hot(4, 1)
        assert losses.pearson_loss(T(h), h).item() == pytest.approx(1.0, abs=1e-5)

    def test_documented_example(self):
        v = losses.pearson_loss(T([0.2, 0.5, 0.3]), losses.one_hot(3, 0)).item()
        assert v == pytest.approx(-0.756, abs=1e-3)

    def test_uniform_c_guarded_to_zero(self):
        v = losses.pearson_loss(T([0.25] * 4), losses.one_hot(4, 2)).item()
        assert abs(v) < 1e-3

    def test_single_domain_raises(self):
        with pytest.raises(ValueError, match="2 domains"):
            losses.pearson_loss(T([1.0]), np.array([1.0]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 10.0),
           st.floats(-5.0, 5.0))
    def test_affine_invariance(self, seed, a, b):
        rng = np.random.default_rng(seed)
        c = rng.random(5)
        c[0] += 1.0  # guarantee nonzero variance
        h = losses.one_hot(5, int(rng.integers(5)))
        # negligible epsilon: the guard itself breaks exact scale invariance
        base = losses.pearson_loss(T(c), h, epsilon=1e-12).item()
        scaled = losses.pearson_loss(T(a * c + b), h, epsilon=1e-12).item()
        assert scaled == pytest.approx(base, abs=1e-6)

    def test_abs_flag(self):
        c = [0.2, 0.5, 0.3]
        h = losses.one_hot(3, 0)
        v = losses.pearson_loss(T(c), h, use_abs=True).item()
        assert v == pytest.approx(0.756, abs=1e-3)


class TestRandomizedCE:
    def test_known_draw(self):
        c = T([0.1, 0.8, 0.1])

        class FixedRng:
            def integers(self, n):
                return 1

        v = losses.randomized_ce_loss(c, FixedRng()).item()
        assert v == pytest.approx(-math.log(0.8), abs=1e-6)

    def test_uniform_c_gives_log_n(self):
        for n in (2, 5, 11):
            c = T(np.full(n, 1.0 / n))
            v = losses.randomized_ce_loss(c, np.random.default_rng(0)).item()
            assert v == pytest.approx(math.log(n), abs=1e-6)

    def test_seeded_draws_reproducible(self):
        c = T(np.linspace(0.1, 0.4, 4) / np.sum(np.linspace(0.1, 0.4, 4)))
        a = [losses.randomized_ce_loss(c, np.random.default_rng(7)).item()
             for _ in range(1)]
        b = [losses.randomized_ce_loss(c, np.random.default_rng(7)).item()
             for _ in range(1)]
        assert a == b


class TestDiscreteUniform:
    def test_minimum_at_uniform(self):
        v = losses.discrete_uniform_loss(T([1 / 3] * 3)).item()
        assert v == pytest.approx(math.log(3), abs=1e-9)

    def test_documented_example(self):
        v = losses.discrete_uniform_loss(T([0.7, 0.2, 0.1])).item()
        assert v == pytest.approx(1.42290, abs=1e-4)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 8))
    def test_gibbs_bound(self, seed, n):
        rng = np.random.default_rng(seed)
        c = rng.dirichlet(np.ones(n))
        assert losses.discrete_uniform_loss(T(c)).item() >= math.log(n) - 1e-9


class TestCombinedLoss:
    def test_arithmetic(self):
        cfg = losses.LossConfig(variant="DU", lam=0.3)
        v = losses.combined_loss(T(0.4), T(1.0), cfg).item()
        assert v == pytest.approx(0.7)

    def test_lambda_zero_equals_seg(self):
        cfg = losses.LossConfig(variant="PC", lam=0.0)
        v = losses.combined_loss(T(0.42), T(123.0), cfg).item()
        assert v == pytest.approx(0.42)

    def test_none_returns_seg(self):
        cfg = losses.LossConfig(variant="NONE")
        assert losses.combined_loss(T(0.5), None, cfg).item() == pytest.approx(0.5)

    def test_missing_reg_term_raises(self):
        cfg = losses.LossConfig(variant="DU", lam=0.3)
        with pytest.raises(ValueError, match="regularization"):
            losses.combined_loss(T(0.5), None, cfg)

    def test_invalid_lambda_rejected(self):
        with pytest.raises(ValueError, match="lambda"):
            losses.LossConfig(variant="PC", lam=1.5)

    @pytest.mark.parametrize("variant,lam", [("PC", 0.2), ("DU", 0.3),
                                             ("RAND", 0.1)])
    def test_tuned_lambda_weighting_exact(self, variant, lam):
        cfg = losses.LossConfig(variant=variant, lam=lam)
        l_seg, l_reg = 0.37, 0.81
        v = losses.combined_loss(T(l_seg), T(l_reg), cfg).item()
        assert v == l_seg + lam * l_reg


class TestDifferentiability:
    def test_combined_loss_gradient_wrt_logits(self):
        # logits -> softmax seg probs + softmax domain probs -> Eq-style loss
        from dsseg import nn_ops
        rng = np.random.default_rng(0)
        seg_logits = rng.standard_normal((2, 8))
        dom_logits = rng.standard_normal(4)
        g = (rng.random(8) < 0.5).astype(float)
        cfg = losses.LossConfig(variant="DU", lam=0.3)

        def fwd(ts):
            s = nn_ops.softmax(ts[0], axis=0)
            c = nn_ops.softmax(ts[1], axis=0)
            l_seg = losses.soft_dice(s[1], g)
            l_reg = losses.discrete_uniform_loss(c)
            return losses.combined_loss(l_seg, l_reg, cfg)

        report = check_function("combined_loss", fwd,
                                [seg_logits, dom_logits], tol=1e-4)
        assert report.passed, str(report)

    def test_pearson_gradient(self):
        rng = np.random.default_rng(1)
        h = losses.one_hot(5, 2)

        def fwd(ts):
            from dsseg import nn_ops
            c = nn_ops.softmax(ts[0], axis=0)
            return losses.pearson_loss(c, h)

        report = check_function("pearson", fwd, [rng.standard_normal(5)],
                                tol=1e-4)
        assert report.passed, str(report)
