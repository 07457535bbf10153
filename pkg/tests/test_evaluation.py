"""Monte Carlo harness against the exact propagated curves."""

import numpy as np
import pytest

from latentsafe.control import (
    MODE_MAX_ACTION,
    CertificateConfig,
    DtcbfParams,
    OfflineKernel,
    dtcbf_controller,
    proposed_controller,
)
from latentsafe.errors import ConfigurationError
from latentsafe.evaluation import (
    METRIC_CUMULATIVE,
    METRIC_INSTANTANEOUS,
    METRIC_LONGTERM_HYBRID,
    METRIC_LONGTERM_PURE,
    emit_report,
    exact_long_term_curve,
    parse_curves_csv,
    run_experiment,
)
from latentsafe.mdp import TabularPolicy, p_offline_matrix
from latentsafe.oracle import q_dp, value_dp


@pytest.fixture(scope="module")
def setup(driving, uniform5):
    model = driving.model
    value = value_dp(model, uniform5)
    q = q_dp(model, uniform5)
    config = CertificateConfig(epsilon=0.2, selection_mode=MODE_MAX_ACTION)
    controller = proposed_controller(model, q, uniform5, config)
    return model, uniform5, value, controller


@pytest.fixture(scope="module")
def small_result(setup):
    model, policy, value, controller = setup
    return run_experiment(
        model,
        controller,
        policy,
        x0=0,
        seed=0,
        epsilon=0.2,
        batches=20,
        trajs_per_batch=60,
        env_id="driving",
        value=value,
    )


class TestCurveShapes:
    def test_hybrid_time_zero_is_exact_value(self, setup, small_result):
        model, _, value, _ = setup
        hybrid = small_result.curves[METRIC_LONGTERM_HYBRID]
        v0 = value.value(0, model.horizon)
        # every trajectory contributes the same summand: no prefix randomness,
        # so mean and band collapse to V(x0, H) up to float accumulation noise
        assert abs(hybrid.mean[0] - v0) < 1e-14
        assert hybrid.half_width[0] < 1e-14

    def test_pure_final_point_equals_cumulative(self, small_result):
        pure = small_result.curves[METRIC_LONGTERM_PURE]
        cumulative = small_result.curves[METRIC_CUMULATIVE]
        assert pure.mean[-1] == cumulative.mean[-1]

    def test_cumulative_nonincreasing(self, small_result):
        cumulative = small_result.curves[METRIC_CUMULATIVE].mean
        assert np.all(np.diff(cumulative) <= 1e-15)

    def test_instantaneous_dominates_cumulative(self, small_result):
        inst = small_result.curves[METRIC_INSTANTANEOUS].mean
        cum = small_result.curves[METRIC_CUMULATIVE].mean
        assert np.all(inst >= cum - 1e-15)

    def test_estimators_agree(self, small_result):
        hybrid = small_result.curves[METRIC_LONGTERM_HYBRID]
        pure = small_result.curves[METRIC_LONGTERM_PURE]
        combined = np.sqrt(hybrid.half_width**2 + pure.half_width**2) / 1.96
        assert np.all(np.abs(hybrid.mean - pure.mean) <= 3 * combined + 1e-12)

    def test_probabilities_in_range(self, small_result):
        for stats in small_result.curves.values():
            assert stats.mean.min() >= 0.0 and stats.mean.max() <= 1.0
            assert np.all(stats.half_width >= 0.0)


class TestExactCurve:
    def test_starts_at_value(self, setup):
        model, policy, value, controller = setup
        curve = exact_long_term_curve(model, controller, policy, 0, value)
        assert curve[0] == value.value(0, model.horizon)

    def test_matches_single_time_propagator(self, setup):
        from latentsafe.oracle import mixed_policy_long_term_safety

        model, policy, value, controller = setup
        curve = exact_long_term_curve(model, controller, policy, 0, value)
        for t in (0, 3, 7, model.horizon):
            single = mixed_policy_long_term_safety(
                model, controller.action_distribution, policy, t, 0
            )
            assert abs(curve[t] - single) < 1e-12

    def test_monte_carlo_brackets_exact(self, setup, small_result):
        model, policy, value, controller = setup
        curve = exact_long_term_curve(model, controller, policy, 0, value)
        hybrid = small_result.curves[METRIC_LONGTERM_HYBRID]
        assert np.all(np.abs(hybrid.mean - curve) <= hybrid.half_width + 1e-12)

    def test_pure_estimator_consistent_at_horizon(self, setup, small_result):
        """Monte Carlo cross-check of the exact propagation at full switch time."""
        model, policy, value, controller = setup
        curve = exact_long_term_curve(model, controller, policy, 0, value)
        pure = small_result.curves[METRIC_LONGTERM_PURE]
        se = pure.half_width[-1] / 1.96
        assert abs(pure.mean[-1] - curve[-1]) <= 3 * se + 1e-12

    def test_dtcbf_curve_differs(self, driving, setup):
        model, policy, value, _ = setup
        rows, defined = p_offline_matrix(model, driving.behavioral)
        baseline = dtcbf_controller(model, OfflineKernel(rows, defined), DtcbfParams())
        curve = exact_long_term_curve(model, baseline, policy, 0, value)
        assert curve[0] == value.value(0, model.horizon)
        assert curve.min() < 0.5  # the baseline collapses under online dynamics

    def test_objective_certified_for_attainable_tolerance(self, setup, small_result):
        """With a risk tolerance above 1 - V(x0, H), the certified controller
        keeps long-term safety over the threshold at every switch time."""
        model, policy, value, controller = setup
        v0 = value.value(0, model.horizon)
        epsilon = 1.0 - v0 + 0.005
        threshold = 1.0 - epsilon
        curve = exact_long_term_curve(model, controller, policy, 0, value)
        assert (curve >= threshold).all()
        hybrid = small_result.curves[METRIC_LONGTERM_HYBRID]
        assert np.all(hybrid.mean >= threshold - hybrid.half_width - 1e-12)

    def test_nearest_nominal_curve_is_also_certified(self, setup):
        """Marginalizing the nominal draw through the certificate projection
        keeps the exact long-term curve from decaying, like max-action."""
        from latentsafe.control import MODE_NEAREST_NOMINAL, NearestNominalController

        model, policy, value, _ = setup
        q = q_dp(model, policy)
        controller = NearestNominalController(
            model=model,
            q=q,
            policy=policy,
            nominal=policy,
            config=CertificateConfig(epsilon=0.2, selection_mode=MODE_NEAREST_NOMINAL),
        )
        for x in (0, 44, 137):
            dist = controller.action_distribution(x, 0)
            assert abs(dist.sum() - 1.0) < 1e-12
        curve = exact_long_term_curve(model, controller, policy, 0, value)
        assert curve[0] == value.value(0, model.horizon)
        assert (np.diff(curve) >= -1e-12).all()

    def test_band_calibration_over_seeds(self, setup):
        """Pointwise 95% bands cover the exact curve in >= 95% of entries
        pooled over repeated seeds at the full batch size."""
        model, policy, value, controller = setup
        curve = exact_long_term_curve(model, controller, policy, 0, value)
        total = inside = 0
        for seed in range(8):
            res = run_experiment(
                model, controller, policy, x0=0, seed=seed, epsilon=0.2,
                batches=100, trajs_per_batch=100, value=value,
            )
            hybrid = res.curves[METRIC_LONGTERM_HYBRID]
            hits = np.abs(hybrid.mean - curve) <= hybrid.half_width + 1e-12
            total += hits.size
            inside += int(hits.sum())
        assert inside / total >= 0.95


class TestDeterminism:
    def test_same_seed_same_curves(self, setup):
        model, policy, value, controller = setup
        kwargs = dict(
            x0=0, seed=123, epsilon=0.2, batches=5, trajs_per_batch=40, value=value
        )
        a = run_experiment(model, controller, policy, **kwargs)
        b = run_experiment(model, controller, policy, **kwargs)
        for metric in a.curves:
            assert np.array_equal(a.curves[metric].mean, b.curves[metric].mean)

    def test_worker_count_irrelevant(self, setup):
        model, policy, value, controller = setup
        kwargs = dict(
            x0=0, seed=123, epsilon=0.2, batches=6, trajs_per_batch=40, value=value
        )
        a = run_experiment(model, controller, policy, max_workers=1, **kwargs)
        b = run_experiment(model, controller, policy, max_workers=3, **kwargs)
        for metric in a.curves:
            assert np.array_equal(a.curves[metric].mean, b.curves[metric].mean)

    def test_requires_stationary_policy(self, setup):
        model, _, value, controller = setup
        k_indexed = TabularPolicy(
            table=np.full((model.horizon + 1, model.n_states, 5), 0.2)
        )
        with pytest.raises(ConfigurationError):
            run_experiment(
                model, controller, k_indexed, x0=0, seed=1, epsilon=0.2,
                batches=2, trajs_per_batch=5, value=value,
            )


class TestReports:
    def test_empty_report_is_header_only(self, tmp_path):
        emit_report([], tmp_path, epsilon=0.2)
        lines = (tmp_path / "curves.csv").read_text().splitlines()
        assert lines == ["t,metric,mean,ci_lo,ci_hi,controller"]

    def test_roundtrip(self, setup, small_result, tmp_path):
        model, policy, value, controller = setup
        small_result.exact_longterm = exact_long_term_curve(
            model, controller, policy, 0, value
        )
        summary = emit_report([small_result], tmp_path, epsilon=0.2)
        parsed = parse_curves_csv(tmp_path / "curves.csv")
        key = (controller.controller_id, METRIC_LONGTERM_HYBRID)
        hybrid = small_result.curves[METRIC_LONGTERM_HYBRID]
        assert np.array_equal(parsed[key]["mean"], hybrid.mean)
        assert np.array_equal(parsed[key]["ci_lo"], hybrid.ci_lo)
        exact_key = (controller.controller_id, "longterm_exact")
        assert np.array_equal(parsed[exact_key]["mean"], small_result.exact_longterm)
        assert summary["threshold"] == 0.8
        assert (tmp_path / "summary.json").exists()

    def test_summary_records_threshold_comparison(self, setup, small_result, tmp_path):
        model, policy, value, controller = setup
        small_result.exact_longterm = exact_long_term_curve(
            model, controller, policy, 0, value
        )
        summary = emit_report([small_result], tmp_path, epsilon=0.2)
        entry = summary["controllers"][controller.controller_id]
        assert entry["meets_threshold_at_all_t"] == bool(
            (small_result.exact_longterm >= 0.8).all()
        )
        assert entry["mc_within_ci_of_exact"] is True
