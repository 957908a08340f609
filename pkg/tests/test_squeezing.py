"""Conditional variances, projection noise and the closed-form benchmark."""

import math

import numpy as np
import pytest

from transit_squeeze._exceptions import (
    InvalidParameterError,
    MissingCalibrationError,
    NumericalError,
)
from transit_squeeze.config import apply_overrides
from transit_squeeze.dynamics import MeasurementSetup, run_setup, simulate_repeat
from transit_squeeze.squeezing import (
    CovarianceSummary,
    FeatureRow,
    SqueezingResult,
    analyze_rows,
    batch_statistics,
    bin_record,
    conditional_variance,
    covariance_analysis,
    estimate_conditional,
    fit_lags,
    fit_t2,
    ideal_qnd_variance,
    kappa2_t2,
    pnl_reference,
    reduce_to_features,
    schur_conditional_variance,
    squeezing_db,
    target_edge,
    target_variance,
    transit_lag_time,
)


def _conserved_spin(n_repeats: int, n_bins: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """p ~ N(0, 1/2) held fixed, each bin reads p plus unit-variance noise"""
    rng = np.random.default_rng(seed)
    p = rng.normal(0.0, math.sqrt(0.5), size=n_repeats)
    features = p[:, None] + rng.standard_normal((n_repeats, n_bins))
    truth = np.repeat(p[:, None], n_bins + 1, axis=1)
    return features, truth


class TestConditioning:
    """Test Gaussian conditioning."""

    def test_scalar_example(self):
        """Test Var(p) - Cov^2 / Var(x) on a worked example."""
        assert conditional_variance(1.0, 0.6, 0.6) == pytest.approx(0.4)

    def test_scalar_needs_positive_observation_variance(self):
        """Test that a zero observation variance is rejected."""
        with pytest.raises(InvalidParameterError):
            conditional_variance(1.0, 0.5, 0.0)

    def test_schur_matches_scalar(self):
        """Test that one observed component reduces to the scalar formula."""
        cov = np.array([[0.6, 0.6], [0.6, 1.0]])
        var, weights, _ = schur_conditional_variance(cov, 1, [0], ridge_relative=0.0)
        assert var == pytest.approx(0.4)
        assert weights == pytest.approx([1.0])

    def test_nothing_observed(self):
        """Test that conditioning on nothing leaves the prior."""
        var, weights, ridge = schur_conditional_variance(np.eye(3), 2, [])
        assert var == 1.0
        assert weights.size == 0
        assert ridge == 0.0

    def test_ridge_scales_with_trace(self):
        """Test lambda = r * trace / k."""
        cov = np.diag([2.0, 4.0, 1.0])
        _, _, ridge = schur_conditional_variance(cov, 2, [0, 1], ridge_relative=1e-3)
        assert ridge == pytest.approx(3e-3)

    def test_covariance_needs_two_repeats(self):
        """Test that a single repeat has no covariance."""
        with pytest.raises(InvalidParameterError):
            covariance_analysis(np.ones((1, 3)))

    def test_covariance_is_unbiased(self):
        """Test agreement with numpy's ddof=1 covariance."""
        data = np.random.default_rng(0).standard_normal((50, 3))
        summary = covariance_analysis(data)
        np.testing.assert_allclose(summary.matrix, np.cov(data, rowvar=False))
        assert summary.size == 3
        assert summary.n_repeats == 50

    def test_asymmetric_covariance_rejected(self):
        """Test that a covariance must be symmetric."""
        with pytest.raises(NumericalError):
            CovarianceSummary(matrix=np.array([[1.0, 0.5], [0.0, 1.0]]), means=np.zeros(2), n_repeats=2)


class TestEstimateConditional:
    """Test prediction and retrodiction on a conserved spin."""

    def test_retrodiction_uses_every_bin(self):
        """Test 1 / (2 + 10) for ten unit-noise bins on a prior of 1/2."""
        features, truth = _conserved_spin(4000, 10, seed=1)
        est = estimate_conditional(features, truth, estimator="retrodiction")
        assert est.n_features == 10
        assert est.var_corrected == pytest.approx(1 / 12, rel=0.08)
        assert est.var_prior == pytest.approx(0.5, rel=0.08)

    def test_prediction_uses_bins_before_target(self):
        """Test 1 / (2 + 5) for the five bins before the midpoint."""
        features, truth = _conserved_spin(4000, 10, seed=2)
        est = estimate_conditional(features, truth, estimator="prediction")
        assert est.n_features == 5
        assert est.var_corrected == pytest.approx(1 / 7, rel=0.08)

    def test_retrodiction_never_worse(self):
        """Test that conditioning on more bins never raises the variance."""
        features, truth = _conserved_spin(500, 10, seed=3)
        retro = estimate_conditional(features, truth, estimator="retrodiction")
        pred = estimate_conditional(features, truth, estimator="prediction")
        assert retro.var_conditional <= pred.var_conditional * (1 + 1e-6)
        assert pred.var_conditional <= pred.var_prior

    def test_final_target_prediction_sees_whole_record(self):
        """Test that predicting the last edge conditions on every bin."""
        features, truth = _conserved_spin(200, 6, seed=4)
        assert estimate_conditional(features, truth, target="final", estimator="prediction").n_features == 6

    def test_dof_correction_factor(self):
        """Test the (N - 1) / (N - 1 - k) scaling."""
        features, truth = _conserved_spin(100, 4, seed=5)
        est = estimate_conditional(features, truth)
        assert est.var_corrected == pytest.approx(est.var_conditional * 99 / 95)
        raw = estimate_conditional(features, truth, dof_correction=False)
        assert raw.var_corrected == raw.var_conditional

    def test_held_out_residual_close_to_conditional(self):
        """Test that the out-of-sample residual agrees with the Schur complement."""
        features, truth = _conserved_spin(4000, 10, seed=6)
        est = estimate_conditional(features, truth)
        assert est.var_residual == pytest.approx(est.var_corrected, rel=0.1)

    def test_too_few_repeats(self):
        """Test that bins must not outnumber repeats."""
        features, truth = _conserved_spin(5, 10, seed=7)
        with pytest.raises(NumericalError):
            estimate_conditional(features, truth)

    def test_truth_shape_checked(self):
        """Test that truth needs one more column than the features."""
        features, truth = _conserved_spin(20, 4, seed=8)
        with pytest.raises(InvalidParameterError):
            estimate_conditional(features, truth[:, :-1])

    def test_target_edge(self):
        """Test the midpoint and final edges."""
        assert target_edge(10, "midpoint") == 5
        assert target_edge(10, "final") == 10


class TestProjectionNoiseAndFiguresOfMerit:
    """Test projection noise, squeezing in dB and batch statistics."""

    def test_theory_stationary(self):
        """Test that the stationary-atom variance is used as is."""
        assert pnl_reference("theory_stationary", stationary_variance=0.5) == 0.5

    def test_experiment_45(self):
        """Test 4/5 of the thermal variance."""
        assert pnl_reference("experiment_45", thermal_variance=0.75) == pytest.approx(0.6)

    @pytest.mark.parametrize("mode", ["theory_stationary", "experiment_45"])
    def test_missing_calibration(self, mode):
        """Test that a missing calibration run is reported."""
        with pytest.raises(MissingCalibrationError):
            pnl_reference(mode)

    def test_unknown_mode(self):
        """Test that an unknown PNL mode is rejected."""
        with pytest.raises(InvalidParameterError):
            pnl_reference("guess", 1.0, 1.0)  # type: ignore[arg-type]

    def test_half_is_minus_three_db(self):
        """Test 10 log10(1/2)."""
        assert squeezing_db(0.25, 0.5) == pytest.approx(-3.0103, abs=1e-4)

    def test_zero_variance(self):
        """Test that a perfectly known spin is infinitely squeezed."""
        assert squeezing_db(0.0, 0.5) == -math.inf

    def test_nonpositive_pnl(self):
        """Test that the reference must be positive."""
        with pytest.raises(InvalidParameterError):
            squeezing_db(0.25, 0.0)

    def test_result_rejects_negative_variance(self):
        """Test that a negative conditional variance is a numerical error."""
        with pytest.raises(NumericalError):
            SqueezingResult(var_conditional=-0.1, var_pnl=0.5, xi_squared_db=0.0, estimator="retrodiction")

    def test_xi_squared_linear(self):
        """Test the linear squeezing parameter."""
        result = SqueezingResult(var_conditional=0.1, var_pnl=0.5, xi_squared_db=-10.0, estimator="prediction")
        assert result.xi_squared == pytest.approx(0.1)

    def test_batch_statistics(self):
        """Test mean and sample standard deviation."""
        assert batch_statistics([1.0, 2.0, 3.0]) == pytest.approx((2.0, 1.0))
        assert batch_statistics([-4.0]) == (-4.0, 0.0)
        with pytest.raises(InvalidParameterError):
            batch_statistics([])

    def test_kappa2_t2(self):
        """Test the product kappa^2 T2."""
        assert kappa2_t2(1.61, 0.87) == pytest.approx(1.61**2 * 0.87)

    def test_fit_t2_on_exponential_covariance(self):
        """Test that T2 is read off the off-diagonal decay, ignoring white noise."""
        n, width, t2 = 20, 0.05, 0.3
        lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
        matrix = np.exp(-lag * width / t2) + 5.0 * np.eye(n)
        summary = CovarianceSummary(matrix=matrix, means=np.zeros(n), n_repeats=100)
        assert fit_t2(summary, width) == pytest.approx(t2, rel=1e-4)

    def test_fit_t2_needs_correlation(self):
        """Test that uncorrelated bins have no T2."""
        summary = CovarianceSummary(matrix=np.eye(6), means=np.zeros(6), n_repeats=10)
        with pytest.raises(NumericalError):
            fit_t2(summary, 0.1)

    def test_fit_t2_skips_short_lags(self):
        """Test that lags below min_lag_time do not bias T2."""
        n, width, t2 = 20, 0.05, 0.3
        lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
        matrix = np.exp(-lag * width / t2) + 5.0 * np.eye(n) + 3.0 * (lag == 1) + 1.0 * (lag == 2)
        summary = CovarianceSummary(matrix=matrix, means=np.zeros(n), n_repeats=100)
        assert fit_t2(summary, width, min_lag_time=3 * width) == pytest.approx(t2, rel=1e-4)
        assert fit_t2(summary, width) < t2

    def test_fit_t2_two_bins(self):
        """Test that a two-bin record is a numerical error, not a crash."""
        summary = CovarianceSummary(matrix=np.array([[2.0, 1.0], [1.0, 2.0]]), means=np.zeros(2), n_repeats=10)
        with pytest.raises(NumericalError):
            fit_t2(summary, 0.5)

    def test_fit_t2_non_finite(self):
        """Test that a non-finite autocovariance is a numerical error."""
        matrix = np.ones((6, 6)) + np.eye(6)
        matrix[0, 1] = matrix[1, 0] = np.inf
        summary = CovarianceSummary(matrix=matrix, means=np.zeros(6), n_repeats=10)
        with pytest.raises(NumericalError):
            fit_t2(summary, 0.1)

    @pytest.mark.parametrize(
        "n_bins,min_lag_time,expected",
        [
            (3, 0.0, [1, 2]),
            (10, 0.0, [1, 2, 3, 4, 5]),
            (40, 0.1, list(range(4, 21))),
            # a cutoff past half the record keeps the last two lags
            (10, 5.0, [4, 5]),
        ],
    )
    def test_fit_lags(self, n_bins, min_lag_time, expected):
        """Test the lag window of the T2 fit for a bin width of 0.025 ms."""
        assert list(fit_lags(n_bins, 0.025, min_lag_time)) == expected

    def test_fit_lags_two_bins(self):
        """Test that two bins leave too few lags."""
        with pytest.raises(NumericalError):
            fit_lags(2, 0.1)

    def test_transit_lag_time(self, small_config):
        """Test eight mean free times for moving atoms and none for frozen ones."""
        setup = MeasurementSetup.from_config(small_config)
        assert transit_lag_time(setup) == pytest.approx(8 * setup.geom.mean_free_time)
        frozen = MeasurementSetup.from_config(apply_overrides(small_config, {"dynamics.stationary_atoms": True}))
        assert transit_lag_time(frozen) == 0.0


class TestIdealBenchmark:
    """Test the closed-form homogeneous QND variance."""

    @pytest.mark.parametrize("kappa,duration", [(1.0, 1.0), (1.61, 2.0), (0.5, 0.3)])
    def test_prediction_without_decay(self, kappa, duration):
        """Test 1 / (2 (1 + kappa^2 t))."""
        expected = 1 / (2 * (1 + kappa**2 * duration))
        assert ideal_qnd_variance(kappa, 0.0, duration) == pytest.approx(expected, rel=1e-6)

    def test_midpoint_retrodiction_equals_full_prediction(self):
        """Test that a conserved spin at the midpoint knows the whole record."""
        retro = ideal_qnd_variance(1.61, 0.0, 2.0, estimator="retrodiction", t=1.0)
        assert retro == pytest.approx(ideal_qnd_variance(1.61, 0.0, 2.0), rel=1e-6)

    def test_steady_state_with_decay(self):
        """Test the Riccati fixed point under decay and measurement."""
        kappa, gamma = 1.0, 1.0
        steady = (-gamma + math.sqrt(gamma**2 + 4 * kappa**2 * gamma * 0.5)) / (2 * kappa**2)
        assert ideal_qnd_variance(kappa, gamma, 20.0) == pytest.approx(steady, rel=1e-5)

    def test_no_measurement_keeps_prior(self):
        """Test that without coupling the spin stays at its prior."""
        assert ideal_qnd_variance(0.0, 0.5, 3.0) == pytest.approx(0.5)

    def test_target_outside_record(self):
        """Test that the target time must lie inside the record."""
        with pytest.raises(InvalidParameterError):
            ideal_qnd_variance(1.0, 0.0, 1.0, t=2.0)


class TestReduction:
    """Test binning and the in-worker feature reduction."""

    def test_bin_record(self):
        """Test equal-time bin means."""
        binned = bin_record(np.arange(12.0).reshape(1, 12), 4)
        np.testing.assert_allclose(binned, [[1.0, 4.0, 7.0, 10.0]])

    def test_bin_record_takes_in_phase(self):
        """Test that complex baseband is binned on its real part."""
        binned = bin_record(np.ones((2, 6)) + 3j, 3)
        np.testing.assert_allclose(binned, np.ones((2, 3)))

    def test_too_many_bins(self):
        """Test that bins cannot outnumber samples."""
        with pytest.raises(InvalidParameterError):
            bin_record(np.ones((1, 3)), 4)

    def test_bin_record_weighted(self):
        """Test that weighted bins recover the template amplitude, whatever the weights."""
        weights = np.array([0.0, 1.0, -2.0, 0.5, 0.0, 3.0])
        binned = bin_record(2.5 * weights[None, :], 2, weights=weights)
        np.testing.assert_allclose(binned, [[2.5, 2.5]])

    def test_bin_record_weight_shape(self):
        """Test that one weight per sample is required."""
        with pytest.raises(InvalidParameterError):
            bin_record(np.ones((1, 6)), 2, weights=np.ones(5))

    def test_bin_record_dark_bin(self):
        """Test that a bin with all-zero weights is rejected."""
        with pytest.raises(InvalidParameterError):
            bin_record(np.ones((1, 6)), 2, weights=np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0]))

    def test_reduce_to_features(self, small_config):
        """Test that a repeat reduces to one value per bin and the edge truth."""
        setup = MeasurementSetup.from_config(small_config)
        row = reduce_to_features(simulate_repeat(setup, np.random.default_rng(0)), setup)
        assert row.features.shape == (4,)
        assert row.truth_p.shape == (5,)
        assert np.all(np.isfinite(row.features))

    def test_strobed_features_keep_continuous_shot_noise(self, small_config):
        """Test that matched-filtered bins of a pulsed probe carry shot noise 1 / (2 bin width)."""
        cfg = apply_overrides(small_config, {"coupling.kappa_target": 0.0, "dynamics.n_sim": 1})
        setup = MeasurementSetup.from_config(cfg)
        assert setup.duty == pytest.approx(0.1)
        rows = run_setup(setup, 200, seed=1, reducer=reduce_to_features)
        features = np.stack([r.features for r in rows])
        bin_width = setup.duration / setup.n_bins
        assert np.var(features) == pytest.approx(1 / (2 * bin_width), rel=0.15)

    def test_strobed_features_read_kappa_p(self, small_config):
        """Test that matched-filtered bins of a pulsed homogeneous probe read kappa times P."""
        kappa = 5.0
        cfg = apply_overrides(
            small_config,
            {
                "beam.shape": "tophat",
                "beam.diameter_mm": 10.0,
                "coupling.kappa_target": kappa,
                "dynamics.stationary_atoms": True,
            },
        )
        setup = MeasurementSetup.from_config(cfg)
        rows = run_setup(setup, 300, seed=2, reducer=reduce_to_features)
        features = np.stack([r.features for r in rows]).ravel()
        truth = np.stack([r.truth_p for r in rows])
        p_mid = (0.5 * (truth[:, :-1] + truth[:, 1:])).ravel()
        slope = np.cov(features, p_mid)[0, 1] / np.var(p_mid, ddof=1)
        assert slope == pytest.approx(kappa, rel=0.1)

    def test_analyze_rows(self):
        """Test a batch of rows against a PNL of 1/2."""
        features, truth = _conserved_spin(4000, 10, seed=9)
        rows = [FeatureRow(f, t) for f, t in zip(features, truth)]
        result = analyze_rows(rows, var_pnl=0.5)
        assert result.xi_squared_db == pytest.approx(10 * math.log10(1 / 6), abs=0.35)
        assert result.n_repeats == 4000
        assert result.kappa2_T2 is None

    def test_analyze_rows_reports_both_variances(self):
        """Test that the raw and dof-corrected variances and the ridge are carried."""
        features, truth = _conserved_spin(200, 10, seed=11)
        rows = [FeatureRow(f, t) for f, t in zip(features, truth)]
        result = analyze_rows(rows, var_pnl=0.5)
        assert result.var_corrected == pytest.approx(result.var_conditional * 199 / 189)
        assert result.ridge > 0
        assert result.xi_squared_db == pytest.approx(squeezing_db(result.var_corrected, 0.5))

    def test_analyze_rows_two_bins(self):
        """Test that a two-bin record still gives a squeezing result without kappa^2 T2."""
        features, truth = _conserved_spin(500, 2, seed=12)
        rows = [FeatureRow(f, t) for f, t in zip(features, truth)]
        result = analyze_rows(rows, var_pnl=0.5, kappa=1.61, bin_width=0.5)
        assert result.kappa2_T2 is None
        assert math.isfinite(result.xi_squared_db)

    def test_target_variance(self):
        """Test the sample variance of the true target quadrature."""
        features, truth = _conserved_spin(4000, 4, seed=10)
        rows = [FeatureRow(f, t) for f, t in zip(features, truth)]
        assert target_variance(rows) == pytest.approx(np.var(truth[:, 2], ddof=1))
