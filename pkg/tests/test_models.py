import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from labelshift.kernels import KernelSpec, nw_regress_1d, nw_regress_multi
from labelshift.models import (
    DensityRatioModel,
    ExpTilt,
    FixedDensity,
    GaussianLinear,
    NonparamRegressor,
    TruncationError,
    cond_expect,
    fit_gaussian_linear,
    identity_features,
    nonparam_cond_expect,
    normalize_ratio,
    paper_features,
    paper_misspecified_model,
    weights_w,
)
from labelshift.quadrature import gauss_legendre
from labelshift.sampling import StackedSample, generate_paper_design, true_conditional_model

RULE = gauss_legendre(50, -5.0, 5.0)


def _mean_rule(model, x, m=50, width=8.0):
    mu = model.mean(x)
    return gauss_legendre(m, mu - width * model.sigma, mu + width * model.sigma)


@pytest.fixture(scope="module")
def design():
    return generate_paper_design(400, 21).sample


class TestRatioModels:
    def test_identity_base_normalizer_is_one(self, design):
        model = normalize_ratio(lambda y: np.ones_like(y), design)
        assert model.normalizer == pytest.approx(1.0, rel=1e-14)

    def test_hand_normalizer(self):
        s = StackedSample([[0.0], [0.0], [0.0]], [1, 1, 0], [0.0, math.log(2), np.nan])
        model = normalize_ratio(np.exp, s)
        assert model.normalizer == pytest.approx(2 / 3, rel=1e-14)
        tilt_model = normalize_ratio(ExpTilt(0.0, 1.0), s)
        assert tilt_model(0.0) == pytest.approx(2 / 3, rel=1e-14)

    def test_zero_base_rejected(self, design):
        with pytest.raises(ValueError):
            normalize_ratio(lambda y: np.zeros_like(y), design)

    def test_normalizer_validation(self):
        with pytest.raises(ValueError):
            DensityRatioModel(ExpTilt(), normalizer=0.0)

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(-5, 5), b=st.floats(-3, 3), k=st.floats(1e-3, 1e3), seed=st.integers(0, 50))
    def test_normalization_identity_and_scale_invariance(self, a, b, k, seed):
        s = generate_paper_design(60, seed).sample
        model = normalize_ratio(ExpTilt(a, b), s)
        r = s.r.astype(float)
        assert np.sum(r * model(s.y_or(0.0))) / s.n == pytest.approx(s.pi, abs=1e-12)
        again = normalize_ratio(ExpTilt(a, b).scaled(k), s)
        assert again == model
        generic = normalize_ratio(lambda y: k * np.exp(a + b * y), s)
        assert_allclose(generic(s.source_y), model(s.source_y), rtol=1e-12)

    def test_steep_tilt_does_not_overflow(self, design):
        model = normalize_ratio(ExpTilt(0.0, 400.0), design)
        assert np.mean(design.r * model(design.y_or(0.0))) == pytest.approx(design.pi, abs=1e-12)

    def test_powers(self):
        m = DensityRatioModel(ExpTilt(0.2, 1.5), normalizer=3.0)
        assert m.tilt.power(2)(0.7) == pytest.approx(m(0.7) ** 2, rel=1e-14)
        generic = DensityRatioModel(lambda y: 1 + y**2, normalizer=2.0)
        assert generic.power(2)(1.0) == pytest.approx(16.0)


class TestGaussianLinear:
    def test_misspecified_constants(self):
        m = paper_misspecified_model()
        assert m.mean(np.zeros(3)) == pytest.approx(0.003, abs=1e-12)
        assert m.sigma2 == 0.449
        assert_allclose(m.beta, [-7.0, -0.223, 0.363, 0.664])

    def test_paper_feature_map(self):
        f = paper_features(np.array([[0.7, 0.0, 3.0]]))
        assert_allclose(f, [[0.7, 1.0, 3.0 / 2 + 10]])

    def test_density_rows_integrate_to_one(self):
        m = true_conditional_model()
        x = np.array([[0.0, 0.0, 0.0], [1.0, -1.0, 2.0]])
        for row in x:
            rule = _mean_rule(m, row)
            assert m.density(rule.nodes, row[None, :]) @ rule.weights == pytest.approx([1.0], abs=1e-6)

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            GaussianLinear([0.0, 1.0], 0.0)


class TestFit:
    def test_exact_linear_fit(self):
        x = np.linspace(-1, 1, 8)[:, None]
        s = StackedSample.from_source(x, [1, 1, 1, 1, 1, 1, 0, 0], 2 + 3 * x[:6, 0])
        m = fit_gaussian_linear(s)
        assert_allclose(m.beta, [2.0, 3.0], atol=1e-12)
        assert m.sigma2 <= 1e-20

    def test_constant_outcome(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 2))
        s = StackedSample.from_source(x, [1] * 7 + [0] * 3, np.full(7, 4.5))
        m = fit_gaussian_linear(s)
        assert_allclose(m.beta, [4.5, 0.0, 0.0], atol=1e-12)
        assert m.sigma2 <= 1e-20

    def test_large_sample_recovers_truth(self):
        s = generate_paper_design(100_000, 5).sample
        m = fit_gaussian_linear(s)
        assert_allclose(m.beta, [0.0, -0.2, 0.2, 0.4], atol=0.02)
        assert m.sigma2 == pytest.approx(0.4, abs=0.02)

    def test_mle_divisor(self, design):
        m = fit_gaussian_linear(design)
        resid = design.source_y - m.design(design.x[design.r]) @ m.beta
        assert m.sigma2 == pytest.approx(np.mean(resid**2), rel=1e-12)

    def test_rank_deficient(self):
        x = np.column_stack([np.arange(6.0), 2 * np.arange(6.0)])
        s = StackedSample.from_source(x, [1, 1, 1, 1, 0, 0], [1.0, 2.0, 0.0, 1.0])
        with pytest.raises(np.linalg.LinAlgError):
            fit_gaussian_linear(s)

    def test_too_few_rows(self):
        s = StackedSample.from_source(np.arange(4.0), [1, 1, 0, 0], [1.0, 2.0])
        with pytest.raises(ValueError):
            fit_gaussian_linear(s)

    def test_feature_map_kept(self, design):
        assert fit_gaussian_linear(design, paper_features).feature_map is paper_features


class TestCondExpect:
    def test_unit_integrand(self):
        m = GaussianLinear([0.0, 0.5], 0.4)
        assert cond_expect(m, 1.0, np.array([0.2]), RULE) == pytest.approx(1.0, abs=1e-6)

    def test_mgf_closed_form(self):
        m = GaussianLinear([0.0, 0.0], 0.4)
        assert cond_expect(m, ExpTilt(0.0, 1.0), np.array([0.0]), RULE) == pytest.approx(math.exp(0.2), rel=1e-15)
        quad = cond_expect(m, ExpTilt(0.0, 1.0), np.array([0.0]), RULE, closed_form=False)
        assert quad == pytest.approx(math.exp(0.2), abs=1e-8)

    @pytest.mark.parametrize("model", [true_conditional_model(), paper_misspecified_model()], ids=["true", "working"])
    @pytest.mark.parametrize("s", [-1.0, 0.5, 1.2])
    def test_closed_form_matches_quadrature(self, model, s, design):
        tilt = ExpTilt(0.0, s)
        for row in design.x[:25]:
            rule = _mean_rule(model, row)
            exact = cond_expect(model, tilt, row, rule)
            approx = cond_expect(model, tilt, row, rule, closed_form=False)
            assert approx == pytest.approx(exact, abs=1e-8, rel=1e-10)

    @pytest.mark.parametrize("upper", [-1.0, 0.3, 2.0])
    def test_truncated_moment(self, upper):
        m = GaussianLinear([0.1, 0.5], 0.3)
        x = np.array([0.4])
        tilt = ExpTilt(-0.2, 1.1)
        exact = cond_expect(m, tilt, x, RULE, upper=upper)
        approx = cond_expect(m, tilt, x, gauss_legendre(200, -5, 5), upper=upper, closed_form=False)
        assert approx == pytest.approx(exact, abs=1e-8)

    def test_truncation_guard(self):
        m = GaussianLinear([4.5, 0.0], 1.0)
        with pytest.raises(TruncationError):
            cond_expect(m, lambda t: t, np.array([0.0]), RULE)

    def test_fixed_density(self):
        def dens(t, x):
            return np.exp(-0.5 * (t[None, :] - x[:, :1]) ** 2) / math.sqrt(2 * math.pi)

        m = FixedDensity(dens, (-5.0, 5.0))
        assert cond_expect(m, lambda t: t, np.array([0.3]), RULE) == pytest.approx(0.3, abs=1e-4)

    def test_vector_rows(self, design):
        m = true_conditional_model()
        out = cond_expect(m, ExpTilt(0.0, 0.5), design.x[:5], RULE)
        assert out.shape == (5,)


class TestWeights:
    def test_unit_ratio(self):
        s = StackedSample.from_source(np.arange(4.0), [1, 0, 1, 0], [0.1, 0.2])
        w = weights_w(DensityRatioModel(ExpTilt(0.0, 0.0)), GaussianLinear([0.0, 0.0], 1.0), s, RULE)
        assert_allclose(w, 0.5)

    def test_constant_two(self):
        s = StackedSample.from_source(np.arange(4.0), [1, 0, 1, 0], [0.1, 0.2])
        w = weights_w(DensityRatioModel(ExpTilt(math.log(2), 0.0)), GaussianLinear([0.0, 0.0], 1.0), s, RULE)
        assert_allclose(w, 1 / 6)

    def test_closed_form_matches_quadrature(self):
        s = StackedSample.from_source(np.zeros((2, 3)), [1, 0], [0.0])
        ratio = DensityRatioModel(ExpTilt(-0.7, 1.2), normalizer=0.8)
        for model in (true_conditional_model(), paper_misspecified_model()):
            a = weights_w(ratio, model, s, RULE)
            b = weights_w(ratio, model, s, RULE, closed_form=False)
            assert_allclose(a, b, atol=1e-8)

    def test_positive_on_design(self, design):
        ratio = normalize_ratio(ExpTilt(-0.7, 1.2), design)
        w = weights_w(ratio, NonparamRegressor.from_sample(design), design)
        assert np.all(w > 0) and np.all(np.isfinite(w))

    def test_needs_rule_for_parametric(self, design):
        with pytest.raises(ValueError):
            weights_w(DensityRatioModel(), true_conditional_model(), design)


class TestNonparam:
    def test_constant_values(self, design):
        reg = NonparamRegressor.from_sample(design)
        assert nonparam_cond_expect(reg, np.full(design.n1, 3.0), design.x[0]) == pytest.approx(3.0)

    def test_one_dimension_matches_1d(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=30)
        r = np.arange(30) % 3 != 0
        s = StackedSample.from_source(x, r, rng.normal(size=r.sum()))
        reg = NonparamRegressor.from_sample(s)
        out = nonparam_cond_expect(reg, s.source_y, np.array([0.25]))
        assert out == pytest.approx(nw_regress_1d(reg.kernel, x, s.y_or(0.0), r, 0.25), rel=1e-13)
        assert out == pytest.approx(nw_regress_multi(reg.kernel, x[:, None], s.y_or(0.0), r, [0.25]), rel=1e-13)

    def test_bandwidth_rule(self, design):
        reg = NonparamRegressor.from_sample(design)
        assert reg.kernel.bandwidth == pytest.approx(2.5 * design.n1 ** (-1 / 7))

    def test_large_sample_conditional_mean(self):
        s = generate_paper_design(40_000, 9).sample
        reg = NonparamRegressor.from_sample(s, scale=1.0)
        # E_p(Y | x) = (-0.2, 0.2, 0.4) . x = 0.6 at this x
        out = nonparam_cond_expect(reg, s.source_y, np.array([-0.5, 0.5, 1.0]))
        assert abs(out - 0.6) <= 0.1

    def test_standardize_and_refit(self, design):
        reg = NonparamRegressor.from_sample(design, standardize=True)
        other = generate_paper_design(300, 22).sample
        again = reg.refit(other)
        assert again.centers.shape == (other.n1, 3)
        assert again.kernel.bandwidth == pytest.approx(2.5 * other.n1 ** (-1 / 7))

    def test_value_length_checked(self, design):
        reg = NonparamRegressor.from_sample(design)
        with pytest.raises(ValueError):
            reg.expect(np.zeros(3), design.x[0])

    def test_identity_features(self):
        x = np.arange(6.0).reshape(2, 3)
        assert_allclose(identity_features(x), x)
