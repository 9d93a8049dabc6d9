import json
import math

import numpy as np
import pytest

from follmer import (
    BasisSpec,
    BaselineDrift,
    BoundUnavailableError,
    DomainError,
    FittingError,
    FollmerGenericDrift,
    GaussianMixtureTarget,
    InvalidDiffusionError,
    RegressionEstimator,
    TunedDrift,
    baseline_drift,
    check_tuning_boundary,
    fit_follmer_regression,
    fit_regression,
    follmer_schedule_data,
    follmer_tuned_drift,
    get_schedule,
    lipschitz_bound,
    posterior_mean,
    posterior_z_mean,
    score_field,
    singular_decomposition,
    tuned_drift,
)


def gaussian_drift_slope(s, t, variance=1.0):
    """Exact drift slope for a centered Gaussian target: b_t(x) = k_t x."""
    beta, sig = s.beta(t), s.sigma(t)
    bd, sd = s.beta_dot(t), s.sigma_dot(t)
    return (bd * beta * variance + sd * t * sig) / (beta**2 * variance + t * sig**2)


class TestBaselineDrift:
    def test_gaussian_midpoint_value(self, linlin, std_normal_target):
        # Gaussian conditioning: b = beta_dot pm + sigma_dot pzm
        #   = 4/3 - 2/3 = 2/3; the score form must give the same number.
        got = baseline_drift(linlin, std_normal_target, 0.5, np.array([1.0]))
        assert got[0] == pytest.approx(2.0 / 3.0, abs=1e-13)
        # Score route: (beta_dot/beta) x + t sigma (beta_dot sigma - beta
        # sigma_dot)/beta * score, with score = -x/0.375.
        score_route = (1.0 / 0.5) * 1.0 + (0.5 * 0.5 * 1.0 / 0.5) * (-1.0 / 0.375)
        assert got[0] == pytest.approx(score_route, abs=1e-12)
        assert got[0] == pytest.approx(gaussian_drift_slope(linlin, 0.5), abs=1e-13)

    def test_origin_value(self, linlin):
        target = GaussianMixtureTarget([1.0], [[0.7]], [[[0.3]]])
        got = baseline_drift(linlin, target, 0.0, np.array([0.0]))
        assert got[0] == pytest.approx(linlin.beta_dot(0.0) * 0.7, abs=1e-14)

    def test_symmetric_target_zero(self, linlin):
        target = GaussianMixtureTarget([0.5, 0.5], [[-1.0], [1.0]],
                                       [[[0.2]], [[0.2]]])
        for t in (0.0, 0.2, 0.6, 0.95):
            got = baseline_drift(linlin, target, t, np.array([0.0]))
            assert got[0] == pytest.approx(0.0, abs=1e-12)

    def test_two_forms_agree(self, linlin, three_component_target):
        # Conditional-expectation form vs score form, both built from the
        # posterior oracles, on random points across the time range.
        rng = np.random.default_rng(5)
        x = rng.normal(size=(64, 1)) * 2
        for t in np.linspace(0.01, 0.99, 25):
            t = float(t)
            pm = posterior_mean(three_component_target, linlin, t, x)
            pzm = posterior_z_mean(three_component_target, linlin, t, x)
            cond_form = linlin.beta_dot(t) * pm + linlin.sigma_dot(t) * pzm
            beta, sig = linlin.beta(t), linlin.sigma(t)
            score = three_component_target.marginal_score_given(
                beta, math.sqrt(t) * sig, x)
            coeff = t * sig * (linlin.beta_dot(t) * sig - beta * linlin.sigma_dot(t)) / beta
            score_form = (linlin.beta_dot(t) / beta) * x + coeff * score
            np.testing.assert_allclose(cond_form, score_form, atol=1e-9)

    def test_terminal_time_finite(self, linlin, three_component_target):
        got = baseline_drift(linlin, three_component_target, 1.0, np.array([0.4]))
        assert np.isfinite(got).all()
        assert got[0] == pytest.approx(linlin.beta_dot(1.0) * 0.4, abs=1e-12)

    def test_linear_sqrt_rejects_exact_terminal(self, linsqrt, std_normal_target):
        with pytest.raises(DomainError):
            baseline_drift(linsqrt, std_normal_target, 1.0, np.array([0.4]))


class TestScoreField:
    def test_value_and_direct_score(self, linlin, std_normal_target):
        got = score_field(linlin, std_normal_target, 0.5, np.array([1.0]))
        assert got[0] == pytest.approx(-8.0 / 3.0, abs=1e-12)   # = -x / 0.375
        direct = std_normal_target.marginal_score_given(
            0.5, math.sqrt(0.5) * 0.5, np.array([1.0]))
        assert got[0] == pytest.approx(direct[0], abs=1e-10)

    def test_gaussian_marginal_mode(self, linlin):
        target = GaussianMixtureTarget([1.0], [[1.4]], [[[0.5]]])
        t = 0.6
        x = np.array([linlin.beta(t) * 1.4])
        assert score_field(linlin, target, t, x)[0] == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_mixture(self, linlin):
        target = GaussianMixtureTarget([0.5, 0.5], [[-2.0], [2.0]],
                                       [[[0.01]], [[0.01]]])
        got = score_field(linlin, target, 0.9, np.array([0.0]))
        assert got[0] == pytest.approx(0.0, abs=1e-12)

    def test_domain(self, linlin, std_normal_target):
        for t in (0.0, 1.0):
            with pytest.raises(DomainError):
                score_field(linlin, std_normal_target, t, np.array([0.0]))

    def test_mixture_agreement_across_times(self, linlin, three_component_target):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(32, 1)) * 2
        for t in (0.05, 0.3, 0.7, 0.95):
            got = score_field(linlin, three_component_target, t, x)
            direct = three_component_target.marginal_score_given(
                linlin.beta(t), math.sqrt(t) * linlin.sigma(t), x)
            np.testing.assert_allclose(got, direct, atol=1e-10)


class TestTunedDrift:
    def test_g_sigma_reduces_to_baseline_bitwise(self, linlin, three_component_target):
        base = BaselineDrift(linlin, three_component_target)
        tuned = TunedDrift(linlin, three_component_target,
                           lambda t: linlin.sigma(t), check_boundary=False)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(16, 1))
        for t in (0.1, 0.5, 0.9):
            assert np.array_equal(base(t, x), tuned(t, x))

    def test_follmer_linear_linear_value(self, linlin, std_normal_target):
        # (1 + t) b - x with b = 2/3 at (0.5, 1) gives exactly 0.
        field = follmer_tuned_drift(linlin, std_normal_target)
        assert field(0.5, np.array([1.0]))[0] == pytest.approx(0.0, abs=1e-12)

    def test_follmer_special_form_linear_linear(self, linlin, three_component_target):
        # (1+t) b - x == E[x_star - 2 sqrt(t) z | x_t = x], both via oracles.
        field = follmer_tuned_drift(linlin, three_component_target)
        rng = np.random.default_rng(9)
        x = rng.normal(size=(64, 1)) * 1.5
        for t in (0.1, 0.4, 0.8):
            pm = posterior_mean(three_component_target, linlin, t, x)
            pzm = posterior_z_mean(three_component_target, linlin, t, x)
            np.testing.assert_allclose(field(t, x), pm - 2.0 * pzm, atol=1e-10)

    def test_linear_sqrt_score_form(self, linsqrt, three_component_target):
        # (2b - x)/(2 - t) == x/t + score, two independent formulas.
        field = TunedDrift(linsqrt, three_component_target, lambda t: 1.0,
                           check_boundary=False)
        rng = np.random.default_rng(10)
        x = rng.normal(size=(48, 1)) * 1.5
        for t in (0.2, 0.5, 0.85):
            lhs = field(t, x)
            rhs = x / t + score_field(linsqrt, three_component_target, t, x)
            np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_tuning_identity_pure_algebra(self, linlin, three_component_target):
        # The A_t form matches the expanded (g^2-sigma^2)/(2 t sigma) form.
        g = lambda t: math.sqrt(abs(2 * t * linlin.sigma(t) * (
            linlin.sigma(t) / linlin.beta(t) - linlin.sigma_dot(t)) * 0.7))
        field = TunedDrift(linlin, three_component_target, g, check_boundary=False)
        base = BaselineDrift(linlin, three_component_target)
        rng = np.random.default_rng(12)
        x = rng.normal(size=(16, 1))
        for t in (0.15, 0.5, 0.85):
            b = base(t, x)
            beta, sig = linlin.beta(t), linlin.sigma(t)
            bd, sd = linlin.beta_dot(t), linlin.sigma_dot(t)
            expanded = b + (g(t) ** 2 - sig**2) / (2 * t * sig) * (
                beta * b - bd * x) / (sig * bd - sd * beta)
            np.testing.assert_allclose(field(t, x), expanded, atol=1e-12)

    def test_invalid_constant_g_rejected(self, linlin):
        with pytest.raises(InvalidDiffusionError) as info:
            check_tuning_boundary(linlin, lambda t: 1.2)
        assert info.value.which_limit == "origin"

    def test_invalid_terminal_g_rejected(self, linlin):
        # g^2 = sigma^2 + t^2/2 is fine at the origin but g^2/sigma blows up
        # like 1/(1-t) at the terminal time.
        g = lambda t: math.sqrt(linlin.sigma(t) ** 2 + 0.5 * t * t)
        with pytest.raises(InvalidDiffusionError) as info:
            check_tuning_boundary(linlin, g)
        assert info.value.which_limit == "terminal"

    def test_admissible_g_passes(self, linlin):
        g = lambda t: math.sqrt(linlin.sigma(t) ** 2 + 0.44 * t * (1 - t))
        check_tuning_boundary(linlin, g)

    def test_linear_sqrt_unit_g_admitted(self, linsqrt):
        # The classical choice g = 1; its mild sqrt growth of g^2/sigma at 1
        # must not be flagged as divergent.
        check_tuning_boundary(linsqrt, lambda t: 1.0)

    def test_singular_regime_skips_origin_check(self):
        s = get_schedule("quadratic-linear")
        g = lambda t: math.sqrt((1 - t) * (3 - t))
        check_tuning_boundary(s, g)

    def test_functional_wrapper(self, linlin, std_normal_target):
        got = tuned_drift(linlin, std_normal_target,
                          lambda t: linlin.sigma(t), 0.5, np.array([1.0]),
                          check_boundary=False)
        assert got[0] == pytest.approx(2.0 / 3.0, abs=1e-13)


class TestFollmerGenericDrift:
    def test_classical_matches_linear_sqrt_tuning(self, linsqrt, std_normal_target):
        data = follmer_schedule_data(lambda t: 0.0, lambda t: 1.0)
        generic = FollmerGenericDrift(lambda t: 0.0, lambda t: 1.0, data,
                                      std_normal_target)
        special = TunedDrift(linsqrt, std_normal_target, lambda t: 1.0,
                             check_boundary=False)
        x = np.linspace(-2, 2, 9).reshape(-1, 1)
        for t in (0.1, 0.3, 0.5, 0.7, 0.9):
            np.testing.assert_allclose(generic(t, x), special(t, x), atol=1e-9)

    def test_symmetry(self, std_normal_target):
        data = follmer_schedule_data(lambda t: 0.0, lambda t: 1.0)
        generic = FollmerGenericDrift(lambda t: 0.0, lambda t: 1.0, data,
                                      std_normal_target)
        assert generic(0.4, np.array([0.0]))[0] == pytest.approx(0.0, abs=1e-13)

    def test_terminal_limit_is_x_plus_target_score(self):
        # Smoothed target N(0, 1 + eta^2): limit drift x + grad log rho_star.
        eta = 0.3
        target = GaussianMixtureTarget([1.0], [[0.0]], [[[1.0]]], smoothing_eta=eta)
        data = follmer_schedule_data(lambda t: 0.0, lambda t: 1.0)
        generic = FollmerGenericDrift(lambda t: 0.0, lambda t: 1.0, data, target)
        x = np.array([[0.7], [-1.1]])
        want = x - x / (1.0 + eta**2)
        got = generic(1.0 - 1e-4, x)
        np.testing.assert_allclose(got, want, atol=1e-2)

    def test_boundary_h_rejected(self, std_normal_target):
        data = follmer_schedule_data(lambda t: 0.0, lambda t: 1.0)
        generic = FollmerGenericDrift(lambda t: 0.0, lambda t: 1.0, data,
                                      std_normal_target)
        with pytest.raises(DomainError):
            generic(0.0, np.array([0.0]))


class TestFitRegression:
    def test_affine_recovers_gaussian_drift(self, linlin, std_normal_target):
        grid = np.array([0.3, 0.5, 0.7])
        est = fit_regression(linlin, std_normal_target, BasisSpec("affine"),
                             sample_count=100_000, seed=21, time_grid=grid)
        for k, t in enumerate(grid):
            intercept, slope = est.coefficients[k][:, 0]
            assert slope == pytest.approx(gaussian_drift_slope(linlin, t), abs=0.02)
            assert intercept == pytest.approx(0.0, abs=0.02)

    def test_degenerate_point_mass(self, linlin):
        # x_star = m almost surely: the drift is exactly affine and the fit
        # must recover beta_dot m + sigma_dot (x - beta m) / sigma.
        m = 0.7
        target = GaussianMixtureTarget([1.0], [[m]], [[[1e-12]]])
        grid = np.array([0.4])
        est = fit_regression(linlin, target, BasisSpec("affine"),
                             sample_count=20_000, seed=3, time_grid=grid)
        t, x = 0.4, 1.3
        want = (linlin.beta_dot(t) * m
                + linlin.sigma_dot(t) * (x - linlin.beta(t) * m) / linlin.sigma(t))
        got = est(t, np.array([x]))
        assert got[0] == pytest.approx(want, abs=1e-3)

    def test_sample_count_contract(self, linlin, std_normal_target):
        with pytest.raises(FittingError):
            fit_regression(linlin, std_normal_target, BasisSpec("affine"),
                           sample_count=5, seed=0)

    def test_deterministic(self, linlin, std_normal_target):
        kw = dict(sample_count=2000, seed=9, time_grid=np.array([0.3, 0.6]))
        a = fit_regression(linlin, std_normal_target, BasisSpec("affine"), **kw)
        b = fit_regression(linlin, std_normal_target, BasisSpec("affine"), **kw)
        assert np.array_equal(a.coefficients, b.coefficients)

    def test_serialization_roundtrip_bitwise(self, linlin, three_component_target):
        est = fit_regression(linlin, three_component_target,
                             BasisSpec("polynomial", degree=3),
                             sample_count=4000, seed=5,
                             time_grid=np.array([0.2, 0.5, 0.8]))
        text = est.to_json()
        back = RegressionEstimator.from_json(text)
        assert np.array_equal(back.coefficients, est.coefficients)
        assert np.array_equal(back.time_grid, est.time_grid)
        x = np.linspace(-2, 2, 7).reshape(-1, 1)
        for t in (0.1, 0.45, 0.95):
            assert np.array_equal(back(t, x), est(t, x))
        assert json.loads(text) == json.loads(back.to_json())

    def test_rank_deficient_design_ridged(self, linlin, std_normal_target):
        # Duplicate radial centers make the design exactly collinear.
        spec = BasisSpec("radial", centers=((0.0,), (0.0,)), bandwidth=0.5)
        est = fit_regression(linlin, std_normal_target, spec,
                             sample_count=2000, seed=4,
                             time_grid=np.array([0.5]))
        assert est.metadata["ridge_applied"] is True

    def test_loss_floor_reported(self, linlin, std_normal_target):
        est = fit_regression(linlin, std_normal_target, BasisSpec("affine"),
                             sample_count=50_000, seed=13,
                             time_grid=np.array([0.5]))
        floor = est.metadata["variance_floor_per_knot"][0]
        loss = est.metadata["loss_per_knot"][0]
        # Affine basis contains the exact drift, so the training loss sits at
        # the conditional-variance floor (up to the p/n fitting bias).
        assert loss == pytest.approx(floor, rel=0.01)

    def test_lipschitz_constants_reported(self, linlin, std_normal_target):
        est = fit_regression(linlin, std_normal_target, BasisSpec("affine"),
                             sample_count=2000, seed=2,
                             time_grid=np.array([0.4, 0.6]))
        consts = est.lipschitz_constants()
        assert consts.shape == (2,)
        assert np.all(consts >= 0)


class TestFitFollmerRegression:
    def test_classical_control_recovery(self, std_normal_target):
        data = follmer_schedule_data(lambda t: 0.0, lambda t: 1.0)
        grid = np.array([0.2, 0.5, 0.8])
        est = fit_follmer_regression(lambda t: 0.0, lambda t: 1.0, data,
                                     std_normal_target, BasisSpec("affine"),
                                     sample_count=100_000, seed=17,
                                     time_grid=grid)
        oracle = FollmerGenericDrift(lambda t: 0.0, lambda t: 1.0, data,
                                     std_normal_target)
        x = np.linspace(-1.5, 1.5, 7).reshape(-1, 1)
        for t in grid:
            want = oracle(float(t), x)   # a = 0, so u = b^F
            got = est(float(t), x)
            assert np.max(np.abs(got - want)) < 0.05

    def test_zero_g_gives_zero_coefficients(self, std_normal_target):
        data = follmer_schedule_data(lambda t: 0.0, lambda t: 1.0)
        est = fit_follmer_regression(lambda t: 0.0, lambda t: 0.0, data,
                                     std_normal_target, BasisSpec("affine"),
                                     sample_count=2000, seed=1,
                                     time_grid=np.array([0.5]))
        np.testing.assert_allclose(est.coefficients, 0.0, atol=1e-12)

    def test_zero_terminal_cut_rejected(self, std_normal_target):
        data = follmer_schedule_data(lambda t: 0.0, lambda t: 1.0)
        with pytest.raises(FittingError):
            fit_follmer_regression(lambda t: 0.0, lambda t: 1.0, data,
                                   std_normal_target, BasisSpec("affine"),
                                   sample_count=2000, seed=1, terminal_cut=0.0)


class TestLipschitzBound:
    def test_pure_noise_reduces_to_first_term(self, linlin):
        eta = 0.8
        target = GaussianMixtureTarget([1.0], [[0.0]], [[[0.0]]], smoothing_eta=eta)
        for t in (0.3, 0.9):
            sig, beta = linlin.sigma(t), linlin.beta(t)
            first = abs((sig * linlin.sigma_dot(t) * t + beta * linlin.beta_dot(t) * eta**2)
                        / (sig**2 * t + beta**2 * eta**2))
            assert lipschitz_bound(linlin, target, t) == pytest.approx(first, abs=1e-14)

    def test_probe_verification(self, linlin):
        target = GaussianMixtureTarget([0.6, 0.4], [[-1.0], [0.8]],
                                       [[[0.09]], [[0.04]]], smoothing_eta=0.5)
        drift = BaselineDrift(linlin, target)
        rng = np.random.default_rng(6)
        t = 0.5
        probes = rng.normal(size=(1000, 1)) * 1.5
        h = 1e-5
        grads = np.abs(drift(t, probes + h) - drift(t, probes - h)) / (2 * h)
        assert grads.max() <= lipschitz_bound(linlin, target, t)

    def test_unavailable_for_unsmoothed_terminal(self, linlin):
        target = GaussianMixtureTarget([1.0], [[0.0]], [[[1.0]]])
        with pytest.raises(BoundUnavailableError):
            lipschitz_bound(linlin, target, 1.0)
        with pytest.raises(BoundUnavailableError):
            lipschitz_bound(linlin, target, 0.0)

    def test_bounded_support_form_available(self, linlin):
        target = GaussianMixtureTarget([1.0], [[0.0]], [[[1.0]]])
        assert lipschitz_bound(linlin, target, 0.5) > 0


class TestSingularDecomposition:
    def test_quadratic_exponent_is_one(self):
        s = get_schedule("quadratic-linear")
        target = GaussianMixtureTarget([1.0], [[0.0]], [[[1.0]]])
        p, remainder = singular_decomposition(s, target)
        assert p == pytest.approx(1.0, abs=1e-4)

    def test_remainder_matches_worked_example(self):
        # For beta = t^2, sigma = 1 - t the tuned drift is
        # (1 + 1/(2-t)) b - 2x/(t(2-t)); removing -x/t leaves -x/(2-t).
        s = get_schedule("quadratic-linear")
        target = GaussianMixtureTarget([1.0], [[0.0]], [[[1.0]]])
        p, remainder = singular_decomposition(s, target)
        base = BaselineDrift(s, target)
        x = np.array([[0.9], [-0.4]])
        for t in (1e-4, 0.05, 0.5):
            want = (1 + 1 / (2 - t)) * base(t, x) - x / (2 - t)
            np.testing.assert_allclose(remainder(t, x), want, atol=1e-3)

    def test_requires_singular_regime(self, linlin, std_normal_target):
        with pytest.raises(DomainError):
            singular_decomposition(linlin, std_normal_target)
