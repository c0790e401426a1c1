import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fxsoftmax import oracle
from fxsoftmax import outputs as out
from fxsoftmax.fixedpoint import FixedPoint, RandomStream
from fxsoftmax.outputs import OutputVariant, VariantParams

L = 10


@pytest.fixture(params=["nearest", "prob"])
def ctx(request):
    if request.param == "prob":
        return FixedPoint(mode="prob", rng=RandomStream(123))
    return FixedPoint()


def e(i, n=L):
    v = np.zeros(n, dtype=np.int64)
    v[i] = 1
    return v


logit_vectors = arrays(np.float64, L, elements=st.floats(-20, 20, allow_nan=False))


def slack(ctx, n=L):
    return n * 2.0 ** -(ctx.f - 1)


class TestSoftmax:
    def test_uniform_for_equal_logits(self, ctx):
        p = ctx.decode(out.softmax_forward(ctx.encode(np.full(L, 0.7)), ctx))
        np.testing.assert_allclose(p, 0.1, atol=2**-15)

    def test_large_gap_concentrates(self, ctx):
        x = np.zeros(L)
        x[0] = 30.0
        p = ctx.decode(out.softmax_forward(ctx.encode(x), ctx))
        assert p[0] == 1.0 and np.all(p[1:] == 0)

    def test_two_classes_match_sigmoid(self, ctx):
        p = ctx.decode(out.softmax_forward(ctx.encode([1.0, 0.0]), ctx))
        s = math.e / (math.e + 1)
        np.testing.assert_allclose(p, [s, 1 - s], atol=2**-8)

    def test_gradient_of_perfect_prediction_is_zero(self, ctx):
        y = e(3)
        assert np.all(out.softmax_gradient(y * ctx.one, y, ctx) == 0)

    def test_gradient_uniform(self, ctx):
        p = np.full(L, ctx.encode(0.1))
        g = ctx.decode(out.softmax_gradient(p, e(0), ctx))
        np.testing.assert_allclose(g, [-0.9] + [0.1] * 9, atol=2**-16)

    @settings(deadline=None)
    @given(logit_vectors)
    def test_is_distribution(self, x):
        ctx = FixedPoint()
        p = out.softmax_forward(ctx.encode(x), ctx)
        assert np.all(p >= 0) and np.all(p <= ctx.one)
        assert abs(ctx.decode(p).sum() - 1) <= slack(ctx)

    def test_matches_oracle_on_random_logits(self, ctx):
        x = np.random.default_rng(0).uniform(-5, 5, size=(1000, L))
        p = ctx.decode(out.softmax_forward(ctx.encode(x), ctx))
        assert np.max(np.abs(p - oracle.softmax(x))) <= 2**-8

    def test_batched_rows_are_independent(self):
        ctx = FixedPoint()
        x = ctx.encode(np.random.default_rng(1).normal(size=(5, L)))
        batch = out.softmax_forward(x, ctx)
        rows = np.stack([out.softmax_forward(row, ctx) for row in x])
        assert np.array_equal(batch, rows)


class TestCrossEntropy:
    def test_perfect(self):
        assert out.cross_entropy(e(2).astype(float), e(2)) == 0.0

    def test_uniform(self):
        assert out.cross_entropy(np.full(L, 0.1), e(0)) == pytest.approx(math.log(10))

    def test_zero_probability_is_infinite(self):
        assert out.cross_entropy(e(1).astype(float), e(0)) == math.inf

    def test_raw_input(self):
        ctx = FixedPoint()
        p = np.full(L, ctx.encode(0.1))
        assert out.cross_entropy(p, e(0), ctx) == pytest.approx(math.log(10), abs=1e-4)


class TestReluProb:
    def test_all_negative_is_uniform(self, ctx):
        p = out.relu_prob_forward(ctx.encode(-np.arange(1, L + 1)), ctx)
        assert np.all(p == ctx.encode(1 / L))

    def test_normalisation(self, ctx):
        x = np.array([2.0, 1.0] + [-5.0] * 8)
        p = ctx.decode(out.relu_prob_forward(ctx.encode(x), ctx))
        np.testing.assert_allclose(p, [2 / 3, 1 / 3] + [0] * 8, atol=2**-16)

    def test_single_positive(self, ctx):
        x = np.array([-1.0] * 4 + [0.3] + [-2.0] * 5)
        p = out.relu_prob_forward(ctx.encode(x), ctx)
        assert np.array_equal(p, e(4) * ctx.one)

    @settings(deadline=None)
    @given(logit_vectors)
    def test_is_distribution(self, x):
        ctx = FixedPoint()
        p = ctx.decode(out.relu_prob_forward(ctx.encode(x), ctx))
        assert np.all(p >= 0) and abs(p.sum() - 1) <= slack(ctx)


class TestReluProbGradient:
    def test_small_logit_at_true_class(self, ctx):
        x = np.array([0.05] + [1.0] * 9)
        g = out.relu_prob_gradient(ctx.encode(x), e(0), ctx)
        assert g[0] == -ctx.one

    def test_negative_logit_elsewhere(self, ctx):
        x = np.array([1.0, -3.0] + [0.0] * 8)
        g = out.relu_prob_gradient(ctx.encode(x), e(0), ctx)
        assert g[1] == 0

    def test_third_case(self, ctx):
        x = np.array([1.5, 0.5])
        y = np.array([1, 0])
        g = ctx.decode(out.relu_prob_gradient(ctx.encode(x), y, ctx))
        want = oracle.relu_prob_flow(x, y)
        # hand evaluation: -(0 - 1/2) and -(1/1.5 - 1/2)
        np.testing.assert_allclose(want, [-1 / 6, 0.5])
        np.testing.assert_allclose(g, want, atol=2**-15)

    def test_exactly_epsilon_takes_the_general_branch(self):
        ctx = FixedPoint()
        eps = VariantParams().flow_raw(ctx)
        x = np.array([eps, 2 * ctx.one])
        g = out.relu_prob_gradient(x, np.array([1, 0]), ctx)
        assert g[0] != -ctx.one

    @settings(deadline=None)
    @given(logit_vectors, st.integers(0, L - 1))
    def test_bounded_by_inverse_epsilon(self, x, t):
        ctx = FixedPoint()
        g = ctx.decode(out.relu_prob_gradient(ctx.encode(x), e(t), ctx))
        assert np.all(np.abs(g) <= 1 / 0.1)


class TestSmoothed:
    def test_all_negative_is_uniform(self, ctx):
        p = ctx.decode(out.smoothed_relu_forward(ctx.encode(-np.ones(L)), ctx))
        np.testing.assert_allclose(p, 0.1, atol=2**-16)

    def test_one_positive_of_two(self, ctx):
        p = ctx.decode(out.smoothed_relu_forward(ctx.encode([1.0, -1.0]), ctx))
        np.testing.assert_allclose(p, [1, 0], atol=2**-15)

    def test_equal_positive_is_uniform(self, ctx):
        p = ctx.decode(out.smoothed_relu_forward(ctx.encode(np.full(L, 2.0)), ctx))
        np.testing.assert_allclose(p, 0.1, atol=2**-16)

    def test_strictly_positive(self):
        ctx = FixedPoint()
        p = out.smoothed_relu_forward(ctx.encode(np.array([-1.0] * 3)), ctx)
        assert np.all(p > 0)

    def test_gradient_zero_for_inactive(self, ctx):
        x = np.array([2.0, -1.0, 0.0, 1.0])
        g = out.smoothed_relu_gradient(ctx.encode(x), np.array([0, 1, 0, 0]), ctx)
        assert g[1] == 0 and g[2] == 0

    def test_gradient_zero_where_distribution_matches(self, ctx):
        x = np.array([3.0, -1.0, -2.0])
        g = out.smoothed_relu_gradient(ctx.encode(x), np.array([1, 0, 0]), ctx)
        assert g[0] == 0 or abs(ctx.decode(g[0])) <= 2**-15

    @settings(deadline=None)
    @given(logit_vectors, st.integers(0, L - 1))
    def test_bound(self, x, t):
        ctx = FixedPoint()
        raw = ctx.encode(x)
        g = ctx.decode(out.smoothed_relu_gradient(raw, e(t), ctx))
        xv = ctx.decode(raw)
        active = xv > 0
        bound = 1 / (xv[active] + 2**-16) + 2**-15
        assert np.all(np.abs(g[active]) <= bound)
        assert np.all(g[~active] == 0)

    def test_matches_oracle(self):
        ctx = FixedPoint()
        x = np.random.default_rng(3).uniform(-3, 3, size=(200, L))
        y = np.eye(L, dtype=np.int64)[np.random.default_rng(4).integers(0, L, 200)]
        g = ctx.decode(out.smoothed_relu_gradient(ctx.encode(x), y, ctx))
        active = np.abs(x) > 0.05
        want = oracle.smoothed_grad(x, y)
        # dividing by x + eps amplifies the rounding error of y - p by 1/x
        scale = np.maximum(1.0, 1.0 / np.abs(x))
        assert np.max((np.abs(g - want) / scale)[active]) <= 2**-10


class TestReluGradientDirect:
    def test_all_negative(self, ctx):
        y = e(4)
        g = out.relu_gradient_direct(ctx.encode(-np.ones(L)), y, ctx)
        assert np.array_equal(g, -y * ctx.one)

    def test_single_positive_on_target(self, ctx):
        x = np.array([-1.0] * 6 + [0.7] + [-1.0] * 3)
        assert np.all(out.relu_gradient_direct(ctx.encode(x), e(6), ctx) == 0)

    def test_two_positive(self, ctx):
        x = np.array([2.0, 1.0] + [-3.0] * 8)
        g = ctx.decode(out.relu_gradient_direct(ctx.encode(x), e(1), ctx))
        want = [2 / 3, -2 / 3] + [0] * 8
        np.testing.assert_allclose(oracle.relu_grad_direct(x, e(1)), want)
        np.testing.assert_allclose(g, want, atol=2**-16)

    @settings(deadline=None)
    @given(logit_vectors, st.integers(0, L - 1))
    def test_bounded(self, x, t):
        ctx = FixedPoint()
        g = ctx.decode(out.relu_gradient_direct(ctx.encode(x), e(t), ctx))
        assert np.all(np.abs(g) <= 1)


class TestArgmax:
    def test_basic(self):
        assert out.argmax([1, 2, 3]) == 2

    def test_tie_picks_smallest(self):
        assert out.argmax([5, 5, 1]) == 0

    @settings(deadline=None)
    @given(st.integers(0, 2**32))
    def test_forward_maps_preserve_argmax(self, seed):
        ctx = FixedPoint()
        gen = np.random.default_rng(seed)
        # distinct logits, far enough apart to survive quantisation
        x = gen.permutation(L) * 0.5 + gen.uniform(0, 0.01)
        raw = ctx.encode(x)
        want = out.argmax(raw)
        assert out.argmax(out.softmax_forward(raw, ctx)) == want
        assert out.argmax(out.smoothed_relu_forward(raw, ctx)) == want
        if np.any(x > 0):
            assert out.argmax(out.relu_prob_forward(raw, ctx)) == want


class TestBranchAgreement:
    def test_fixed_and_oracle_pick_the_same_cases(self):
        ctx = FixedPoint()
        gen = np.random.default_rng(8)
        margin = 2.0 ** -(ctx.f - 2)
        eps = 0.1
        x = gen.uniform(-1, 1, size=(2000, L))
        x = x[np.all(np.abs(x - eps) > margin, axis=1) & np.all(np.abs(x) > margin, axis=1)]
        raw = ctx.encode(x)
        y = np.eye(L, dtype=np.int64)[gen.integers(0, L, len(x))]
        assert np.array_equal(ctx.lt(raw, ctx.constant(eps)), x < eps)
        assert np.array_equal(ctx.relu(raw).sum(axis=1) == 0, oracle.relu(x).sum(axis=1) == 0)
        g_fix = ctx.decode(out.relu_prob_gradient(raw, y, ctx))
        g_ref = oracle.relu_prob_flow(x, y)
        assert np.array_equal(g_fix == 0, g_ref == 0)
        assert np.array_equal(g_fix == -1, g_ref == -1)


class TestDispatch:
    @pytest.mark.parametrize("variant", list(OutputVariant))
    def test_gradient_shapes(self, variant):
        ctx = FixedPoint()
        x = ctx.encode(np.random.default_rng(0).normal(size=(4, L)))
        y = np.eye(L, dtype=np.int64)[[0, 1, 2, 3]]
        g, p = out.output_gradient(variant, x, y, ctx)
        assert g.shape == x.shape
        assert (p is None) == (variant in (OutputVariant.RELU_PROB, OutputVariant.RELU_GRAD))

    def test_parse(self):
        assert OutputVariant.parse("relu_prob") is OutputVariant.RELU_PROB
        assert not OutputVariant.RELU_GRAD.has_loss

    def test_params_validation(self):
        with pytest.raises(ValueError):
            VariantParams(epsilon_flow=1.5)
        with pytest.raises(ValueError):
            VariantParams(epsilon_smooth=0.0)
        assert VariantParams().smooth_raw(FixedPoint()) == 1
