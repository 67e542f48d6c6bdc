"""Tests for the Monte Carlo engine, rate fitting and the theory comparison."""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from consdetect.core.detectors import consensus_step, initial_state
from consdetect.core.errors import ConfigError, InsufficientDataError
from consdetect.core.gaussian import RngSeed, psd_factor, q_function
from consdetect.core.models import (
    Edge,
    ErrorCurve,
    ErrorPoint,
    ExperimentConfig,
    LinkFailureMetropolis,
    RateReport,
    Supergraph,
    SwitchingFusion,
)
from consdetect.core.montecarlo import (
    H1_STREAM_OFFSET,
    average_curve,
    centralized_curve,
    compare_report,
    default_window,
    estimate_chunk_bytes,
    exact_switching_fusion_curve,
    fit_decay_rate,
    fit_or_censor,
    no_cooperation_curve,
    path_seed,
    run_experiment,
    run_trajectories,
    simulate_paths,
    wilson_interval,
)
from consdetect.core.network import ConsensusKernel, geometric_supergraph, metropolis_weights, pendant_supergraph
from consdetect.core.observation import derive_stats, equivalent_uncorrelated_model
from consdetect.core.theory import SwitchingFusionSpec, phi_star, theorem3_necessary


def _switching_cfg(p: float, n: int = 2, c_i: float = 0.125, **overrides) -> ExperimentConfig:
    fields = {
        "model": equivalent_uncorrelated_model(n, c_i),
        "weights": SwitchingFusion(N=n, p=p),
        "paths_per_hypothesis": 2000,
        "k_max": 4,
        "master_seed": 17,
    }
    fields.update(overrides)
    return ExperimentConfig(**fields)


def _within(p_hat: float, p: float, n: int, sigmas: float = 4.0) -> bool:
    return abs(p_hat - p) <= sigmas * math.sqrt(p * (1 - p) / n)


@pytest.fixture
def path_graph_cfg():
    """Three sensors on a path with unreliable links."""
    graph = Supergraph(N=3, edges=(Edge(i=1, j=2, q=0.5), Edge(i=2, j=3, q=0.7)))
    return ExperimentConfig(
        model=equivalent_uncorrelated_model(3, 0.05),
        weights=LinkFailureMetropolis(graph=graph),
        paths_per_hypothesis=300,
        k_max=12,
        master_seed=3,
        chunk_size=64,
    )


class TestStreams:
    """Random stream layout."""

    def test_path_seed(self):
        """H0 and H1 paths live in disjoint stream ranges."""
        cfg = _switching_cfg(0.5, stream_offset=10)
        assert path_seed(cfg, 0, 4) == RngSeed(master_seed=17, stream_index=14)
        assert path_seed(cfg, 1, 4) == RngSeed(master_seed=17, stream_index=10 + H1_STREAM_OFFSET + 4)

    def test_trajectory_replays_detector_api(self, path_graph_cfg):
        """A recorded path equals the recursion driven by the same stream."""
        cfg = path_graph_cfg
        traj = run_trajectories(cfg, 2)
        assert traj.shape == (2, cfg.k_max, 3)

        stats = derive_stats(cfg.model)
        kernel = ConsensusKernel(cfg.weights)
        gen = path_seed(cfg, 0, 1).generator()
        eta = stats.m_eta0 + gen.standard_normal((cfg.k_max, 3)) @ psd_factor(stats.s_eta).T
        flags = kernel.realize(gen.random((cfg.k_max - 1, kernel.draws_per_step)))
        weights = metropolis_weights(cfg.weights.graph, flags)

        state = initial_state(eta[0])
        np.testing.assert_allclose(traj[1, 0], state.x, atol=1e-12)
        for k in range(1, cfg.k_max):
            state = consensus_step(state, weights[k - 1], eta[k])
            np.testing.assert_allclose(traj[1, k], state.x, atol=1e-12)

    def test_trajectory_count_capped(self, path_graph_cfg):
        """No more trajectories than paths are returned."""
        assert run_trajectories(path_graph_cfg, 10_000).shape[0] == path_graph_cfg.paths_per_hypothesis


class TestRunExperiment:
    """Error-count estimation."""

    def test_deterministic(self, path_graph_cfg):
        """The same config gives the same curves."""
        assert run_experiment(path_graph_cfg) == run_experiment(path_graph_cfg)

    def test_chunking_does_not_matter(self, path_graph_cfg):
        """Per-path streams make results independent of the chunk size."""
        other = path_graph_cfg.model_copy(update={"chunk_size": 37})
        assert run_experiment(path_graph_cfg) == run_experiment(other)

    def test_workers_do_not_matter(self, path_graph_cfg):
        """One and two worker processes give identical curves."""
        assert run_experiment(path_graph_cfg, workers=1) == run_experiment(path_graph_cfg, workers=2)

    def test_progress(self, path_graph_cfg):
        """Progress reports add up to the number of paths."""
        done: list[int] = []
        run_experiment(path_graph_cfg, progress=done.append)
        assert sum(done) == path_graph_cfg.paths_per_hypothesis

    def test_counts_shape(self):
        """Counts cover every checkpoint and recorded sensor."""
        cfg = _switching_cfg(0.5, n=3, checkpoints=(1, 3), record_sensors=(2,))
        counts, traj = simulate_paths(cfg, 0, 0, 150)
        assert counts.shape == (2, 1)
        assert traj is None
        assert np.all((counts >= 0) & (counts <= 150))

    def test_curves_per_sensor(self):
        """One curve per recorded sensor, each with a containing confidence interval."""
        cfg = _switching_cfg(0.5, n=3, record_sensors=(1, 3))
        curves = run_experiment(cfg)
        assert [c.sensor for c in curves] == [1, 3]
        for curve in curves:
            assert curve.estimator == "h0_symmetry"
            for pt in curve.points:
                assert pt.ci_low <= pt.p_hat <= pt.ci_high
                assert pt.n_paths == cfg.paths_per_hypothesis

    def test_no_cooperation_matches_q(self):
        """With W = I a sensor errs with probability Q(sqrt(2 k C_i))."""
        cfg = _switching_cfg(0.0, k_max=4, paths_per_hypothesis=20_000)
        curve = run_experiment(cfg)[0]
        for k in (1, 4):
            assert _within(curve.at(k).p_hat, q_function(math.sqrt(2 * k * 0.125)), 20_000)

    def test_switching_matches_exact(self):
        """Monte Carlo agrees with the total-probability expression."""
        cfg = _switching_cfg(0.5, k_max=3, paths_per_hypothesis=20_000)
        exact = exact_switching_fusion_curve(SwitchingFusionSpec(n=2, c_i=0.125, p=0.5), [1, 2, 3])
        curve = run_experiment(cfg)[0]
        for k in (1, 2, 3):
            assert _within(curve.at(k).p_hat, exact.at(k).p_hat, 20_000)
        assert exact.at(2).p_hat == pytest.approx(0.2234, abs=5e-4)

    def test_two_hypotheses(self):
        """Simulating H1 too keeps per-hypothesis counts and agrees with the exact curve."""
        cfg = _switching_cfg(0.5, k_max=3, paths_per_hypothesis=5000, estimate_both_hypotheses=True)
        curve = run_experiment(cfg)[0]
        assert curve.estimator == "two_hypothesis"
        assert curve.prior_h0 == 0.5
        exact = exact_switching_fusion_curve(SwitchingFusionSpec(n=2, c_i=0.125, p=0.5), [3])
        pt = curve.at(3)
        assert (pt.n_paths, pt.n_paths_h1, pt.total_paths) == (5000, 5000, 10_000)
        assert pt.p_hat == pytest.approx(pt.total_errors / 10_000, rel=1e-12)
        assert _within(pt.p_hat, exact.at(3).p_hat, 10_000)

    def test_two_hypotheses_unequal_prior(self):
        """With pi0 = 0.9 p_hat weighs the two per-hypothesis error rates by the priors."""
        model = equivalent_uncorrelated_model(2, 0.125).model_copy(update={"prior_h0": 0.9})
        cfg = _switching_cfg(0.5, model=model, k_max=3, paths_per_hypothesis=2000, estimate_both_hypotheses=True)
        curve = run_experiment(cfg)[0]
        assert curve.prior_h0 == 0.9
        for pt in curve.points:
            expected = 0.9 * pt.n_errors / pt.n_paths + 0.1 * pt.n_errors_h1 / pt.n_paths_h1
            assert math.isclose(pt.p_hat, expected, rel_tol=1e-12)
            assert pt.ci_low <= pt.p_hat <= pt.ci_high

    def test_memory_budget(self):
        """Chunks that do not fit the budget are rejected before any work."""
        cfg = _switching_cfg(0.5, k_max=1000, memory_budget_mb=0.01)
        assert estimate_chunk_bytes(cfg) > 0.01 * 1024 * 1024
        with pytest.raises(ConfigError):
            run_experiment(cfg)

    def test_invalid_workers(self):
        """At least one worker is needed."""
        with pytest.raises(ConfigError):
            run_experiment(_switching_cfg(0.5), workers=0)


def _two_point(k: int = 1, p_hat: float = 0.9 * 300 / 2000 + 0.1 * 100 / 2000) -> ErrorPoint:
    return ErrorPoint(
        k=k, p_hat=p_hat, ci_low=0.05, ci_high=0.2, n_errors=300, n_paths=2000, n_errors_h1=100, n_paths_h1=2000
    )


class TestCountIdentity:
    """p_hat must be reproducible from the stored counts."""

    def test_prior_weighted(self):
        """A two-hypothesis point with pi0 = 0.9 is accepted at the prior-weighted value."""
        curve = ErrorCurve(sensor=1, points=(_two_point(),), estimator="two_hypothesis", prior_h0=0.9)
        assert curve.at(1).total_errors == 400
        assert curve.at(1).total_paths == 4000

    def test_pooled_fraction_rejected(self):
        """The pooled error fraction is wrong when the priors are unequal."""
        with pytest.raises(ValidationError):
            ErrorCurve(sensor=1, points=(_two_point(p_hat=400 / 4000),), estimator="two_hypothesis", prior_h0=0.9)

    def test_prior_required(self):
        """Two-hypothesis curves carry their prior."""
        with pytest.raises(ValidationError):
            ErrorCurve(sensor=1, points=(_two_point(),), estimator="two_hypothesis")

    def test_symmetric_counts(self):
        """H0-only points need p_hat = n_errors / n_paths and no H1 counts."""
        with pytest.raises(ValidationError):
            ErrorCurve(sensor=1, points=(ErrorPoint(k=1, p_hat=0.2, ci_low=0.1, ci_high=0.3, n_errors=10, n_paths=100),))
        with pytest.raises(ValidationError):
            ErrorCurve(sensor=1, points=(_two_point(),))

    def test_exact_has_no_counts(self):
        """Exact curves are not backed by paths."""
        with pytest.raises(ValidationError):
            ErrorCurve(
                sensor=1,
                points=(ErrorPoint(k=1, p_hat=0.1, ci_low=0.1, ci_high=0.1, n_errors=10, n_paths=100),),
                estimator="exact",
            )

    def test_average_keeps_identity(self):
        """Averaging two-hypothesis curves pools each hypothesis separately."""
        other = ErrorPoint(
            k=1,
            p_hat=0.9 * 100 / 2000 + 0.1 * 300 / 2000,
            ci_low=0.03,
            ci_high=0.1,
            n_errors=100,
            n_paths=2000,
            n_errors_h1=300,
            n_paths_h1=2000,
        )
        a = ErrorCurve(sensor=1, points=(_two_point(),), estimator="two_hypothesis", prior_h0=0.9)
        b = ErrorCurve(sensor=2, points=(other,), estimator="two_hypothesis", prior_h0=0.9)
        pt = average_curve([a, b]).at(1)
        assert (pt.n_errors, pt.n_paths, pt.n_errors_h1, pt.n_paths_h1) == (400, 4000, 400, 4000)
        assert pt.p_hat == pytest.approx(0.1, rel=1e-12)


class TestWilson:
    """Binomial confidence intervals."""

    def test_known_value(self):
        """10 errors in 100 trials."""
        low, high = wilson_interval(10, 100)
        assert low == pytest.approx(0.0552, abs=1e-3)
        assert high == pytest.approx(0.1744, abs=1e-3)

    def test_edges(self):
        """Zero and all errors stay inside [0, 1] and contain p."""
        assert wilson_interval(0, 50)[0] == 0.0
        assert wilson_interval(50, 50)[1] == 1.0

    def test_invalid(self):
        """More errors than trials is rejected."""
        with pytest.raises(ValueError):
            wilson_interval(5, 4)


class TestRateFit:
    """Decay-rate regression."""

    def test_centralized_curve(self):
        """The fitted slope of the centralized curve is close to C_tot."""
        stats = derive_stats(equivalent_uncorrelated_model(4, 0.0625))
        fit = fit_decay_rate(centralized_curve(stats, range(1, 401)))
        assert fit.source == "exact"
        assert fit.window == (100, 400)
        assert fit.fitted_rate == pytest.approx(0.25, rel=0.05)

    def test_switching_curve(self):
        """The exact switching-fusion curve decays at phi*."""
        spec = SwitchingFusionSpec.from_total(2, 0.25, 0.5)
        fit = fit_decay_rate(exact_switching_fusion_curve(spec, range(100, 2001, 50)), window=(500, 2000))
        assert fit.fitted_rate == pytest.approx(phi_star(spec)[0], rel=0.05)

    def test_no_cooperation_endpoint(self):
        """The endpoint estimate -log p(k)/k approaches C_i from above."""
        model = equivalent_uncorrelated_model(3, 0.1)
        fit = fit_decay_rate(no_cooperation_curve(model, 2, range(1, 1001)), method="endpoint")
        assert fit.method == "endpoint"
        assert fit.stderr == 0.0
        assert 0.1 < fit.fitted_rate < 0.11

    @pytest.mark.parametrize("scale", [1.0, 7.0])
    def test_synthetic_exponential(self, scale):
        """p(k) = c exp(-0.05 k) is fitted at exactly 0.05 whatever the prefactor."""
        points = tuple(
            ErrorPoint(k=k, p_hat=scale * math.exp(-0.05 * k), ci_low=0.0, ci_high=1.0) for k in range(40, 401, 10)
        )
        fit = fit_decay_rate(ErrorCurve(sensor=1, points=points, estimator="exact"))
        assert fit.fitted_rate == pytest.approx(0.05, abs=1e-12)
        assert fit.stderr == pytest.approx(0.0, abs=1e-12)

    def test_default_window(self):
        """The default window covers the last three quarters of the curve."""
        curve = centralized_curve(derive_stats(equivalent_uncorrelated_model(2, 0.1)), [1, 2, 3, 7])
        assert default_window(curve) == (2, 7)

    def test_too_few_errors(self):
        """Checkpoints with fewer than ten errors are not used."""
        points = tuple(
            ErrorPoint(k=k, p_hat=e / 1000, ci_low=0.0, ci_high=0.05, n_errors=e, n_paths=1000)
            for k, e in zip(range(1, 9), [40, 30, 20, 12, 9, 5, 2, 0])
        )
        curve = ErrorCurve(sensor=1, points=points)
        with pytest.raises(InsufficientDataError) as excinfo:
            fit_decay_rate(curve, window=(4, 8))
        assert excinfo.value.usable == 1
        assert fit_decay_rate(curve, window=(1, 8)).n_points == 4


def _zero_curve(sensor: int = 1) -> ErrorCurve:
    return ErrorCurve(
        sensor=sensor,
        points=tuple(ErrorPoint(k=k, p_hat=0.0, ci_low=0.0, ci_high=0.01, n_errors=0, n_paths=400) for k in range(1, 11)),
    )


class TestAverageCurve:
    """Network-average curves."""

    def test_pools_counts(self):
        """Counts are pooled over sensors."""
        a = ErrorCurve(sensor=1, points=(ErrorPoint(k=1, p_hat=0.1, ci_low=0.05, ci_high=0.15, n_errors=10, n_paths=100),))
        b = ErrorCurve(sensor=2, points=(ErrorPoint(k=1, p_hat=0.3, ci_low=0.2, ci_high=0.4, n_errors=30, n_paths=100),))
        avg = average_curve([a, b])
        assert avg.sensor == 0
        assert avg.at(1).p_hat == pytest.approx(0.2)
        assert avg.at(1).n_errors == 40

    def test_mismatched_checkpoints(self):
        """Curves must share checkpoints."""
        a = _zero_curve()
        b = ErrorCurve(sensor=2, points=a.points[:5])
        with pytest.raises(ValueError):
            average_curve([a, b])


class TestComparison:
    """Fitted rates against theory."""

    def test_censored_falls_back(self):
        """A curve with no errors is censored and fitted from the exact fallback."""
        fallback = exact_switching_fusion_curve(SwitchingFusionSpec.from_total(2, 0.25, 0.5), range(1, 11))
        fit, censored = fit_or_censor(_zero_curve(), None, fallback)
        assert censored
        assert fit is not None and fit.sensor == 1 and fit.source == "exact"
        assert fit_or_censor(_zero_curve(), None) == (None, True)

    def test_exact_theory_passes(self):
        """An exact rate within tolerance passes."""
        stats = derive_stats(equivalent_uncorrelated_model(4, 0.0625))
        theory = RateReport(theoretical_rate_or_bound=0.25, regime="optimal", sufficient_condition_met=True, exact=True, c_tot=0.25)
        report = compare_report([centralized_curve(stats, range(1, 401))], theory)
        row = report.sensors[0]
        assert row.passed is True
        assert row.censored is False
        assert row.centralized_rate == 0.25

    def test_bound_only_checks_from_below(self):
        """A lower bound is satisfied by any larger fitted rate."""
        stats = derive_stats(equivalent_uncorrelated_model(4, 0.0625))
        theory = RateReport(theoretical_rate_or_bound=0.1, regime="suboptimal_branch", sufficient_condition_met=False, c_tot=0.25)
        assert compare_report([centralized_curve(stats, range(1, 401))], theory).sensors[0].passed is True

    def test_isolated_ceiling(self):
        """A rate above C_i + |log(1 - P_i)| fails."""
        stats = derive_stats(equivalent_uncorrelated_model(4, 0.0625))
        curve = centralized_curve(stats, range(1, 401)).model_copy(update={"sensor": 1})
        theory = RateReport(
            theoretical_rate_or_bound=0.1,
            regime="suboptimal_branch",
            sufficient_condition_met=False,
            c_tot=0.25,
            sensor_chernoff={1: 0.01},
            sensor_connectivity={1: 0.05},
            sensor_necessary={1: False},
        )
        row = compare_report([curve], theory).sensors[0]
        assert row.isolated_ceiling == pytest.approx(0.01 - math.log(0.95))
        assert row.necessary_met is False
        assert row.passed is False

    def test_censored_without_fallback(self):
        """No fit means no verdict."""
        theory = RateReport(theoretical_rate_or_bound=0.1, regime="optimal", sufficient_condition_met=True, c_tot=0.1)
        row = compare_report([_zero_curve()], theory).sensors[0]
        assert row.censored and row.passed is None and row.empirical_rate is None


@pytest.mark.slow
class TestAcceptance:
    """Statistical experiments at desk scale."""

    def test_two_sensor_oracle_million_paths(self):
        """10^6 paths reproduce the exact two-sensor switching-fusion value."""
        cfg = _switching_cfg(0.5, k_max=2, paths_per_hypothesis=1_000_000, chunk_size=20_000, master_seed=2024)
        pt = run_experiment(cfg, workers=4)[0].at(2)
        exact = exact_switching_fusion_curve(SwitchingFusionSpec(n=2, c_i=0.125, p=0.5), [2]).at(2).p_hat
        assert pt.n_errors is not None and pt.n_paths is not None
        low, high = wilson_interval(pt.n_errors, pt.n_paths, confidence=0.95)
        assert low <= exact <= high

    def test_always_fused_matches_exact(self):
        """With W = J at every step Monte Carlo follows the exact p = 1 curve."""
        cfg = _switching_cfg(1.0, n=4, c_i=0.02, k_max=20, paths_per_hypothesis=50_000, chunk_size=10_000)
        exact = exact_switching_fusion_curve(SwitchingFusionSpec(n=4, c_i=0.02, p=1.0), range(1, 21))
        for curve in run_experiment(cfg, workers=4):
            for k in (1, 2, 5, 10, 20):
                assert _within(curve.at(k).p_hat, exact.at(k).p_hat, 50_000)

    def test_wilson_coverage(self):
        """Nominal 95% Wilson intervals cover the exact value in at least 93% of replicated experiments."""
        block, blocks = 400, 1000
        cfg = _switching_cfg(0.5, k_max=2, paths_per_hypothesis=block * blocks, record_sensors=(1,))
        exact = exact_switching_fusion_curve(SwitchingFusionSpec(n=2, c_i=0.125, p=0.5), [2]).at(2).p_hat
        covered = 0
        for b in range(blocks):
            counts, _ = simulate_paths(cfg, 0, b * block, (b + 1) * block)
            low, high = wilson_interval(int(counts[1, 0]), block)
            covered += low <= exact <= high
        assert covered / blocks >= 0.93

    def test_phase_change(self):
        """The fitted rate grows with q and approaches C_tot on a well connected supergraph."""
        graph = geometric_supergraph(10, 0.6, 1.0, RngSeed(master_seed=5))
        model = equivalent_uncorrelated_model(10, 0.001)
        rates, errors = [], []
        for q in np.linspace(0.05, 0.95, 8):
            cfg = ExperimentConfig(
                model=model,
                weights=LinkFailureMetropolis(graph=graph.with_uniform_q(float(q))),
                paths_per_hypothesis=20_000,
                k_max=500,
                checkpoints=tuple(range(5, 501, 5)),
                master_seed=31,
                chunk_size=1000,
            )
            fit = fit_decay_rate(average_curve(run_experiment(cfg, workers=4)))
            rates.append(fit.fitted_rate)
            errors.append(fit.stderr)
        for (r0, s0), (r1, s1) in zip(zip(rates, errors), zip(rates[1:], errors[1:])):
            assert r1 >= r0 - 2 * math.hypot(s0, s1)
        assert rates[-1] == pytest.approx(0.01, rel=0.25)

    def test_pendant_sensor(self):
        """A weak pendant stays below the isolated ceiling; a strong one beats no cooperation.

        At k = 200 running consensus has already pulled in network information
        even with q_pendant = 0.05, so the weak pendant sits far below the
        no-cooperation curve rather than within two interval widths of it.
        """
        model = equivalent_uncorrelated_model(8, 0.01)
        curves = {}
        for q_pendant in (0.05, 0.5):
            graph = pendant_supergraph(8, 8, 3, q_pendant, 0.8, RngSeed(master_seed=9), radius=0.6)
            cfg = ExperimentConfig(
                model=model,
                weights=LinkFailureMetropolis(graph=graph),
                paths_per_hypothesis=20_000,
                k_max=200,
                checkpoints=(50, 100, 150, 200),
                record_sensors=(8,),
                master_seed=41,
                chunk_size=1000,
            )
            curves[q_pendant] = run_experiment(cfg, workers=4)[0]
        weak, strong = curves[0.05].at(200), curves[0.5].at(200)
        lone = no_cooperation_curve(model, 8, [200]).at(200).p_hat

        assert strong.ci_high < lone
        assert strong.p_hat < weak.p_hat
        assert lone - weak.p_hat > 2 * (weak.ci_high - weak.ci_low)

        ceiling = 0.01 + abs(math.log(0.95))
        fit = fit_decay_rate(curves[0.05], window=(50, 200), method="endpoint")
        assert fit.fitted_rate < ceiling
        assert theorem3_necessary(0.08, 0.01, 0.05) is False
