"""Seeded Monte Carlo estimation of per-sensor error probabilities and their decay rates.

Every path owns a Philox stream keyed by (master_seed, stream_index): H0 path p
uses `stream_offset + p` and H1 path p uses `stream_offset + 2**31 + p`. A path
draws its eta increments first, then its link or fusion uniforms. Paths are
grouped into fixed-size chunks and chunk results are integer error counts, so
the merged result does not depend on how chunks are scheduled.
"""

import math
import time
from collections.abc import Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from logging import getLogger
from typing import Callable, Optional

import numpy as np
from scipy import stats as sps

from consdetect.core.detectors import (
    centralized_error_probability,
    no_cooperation_error_probability,
)
from consdetect.core.errors import ConfigError, InsufficientDataError
from consdetect.core.gaussian import FloatArray, RngSeed, psd_factor
from consdetect.core.models import (
    ComparisonReport,
    ErrorCurve,
    ErrorPoint,
    ExperimentConfig,
    FitMethod,
    FitSource,
    ObservationModel,
    RateFit,
    RateReport,
    SensorComparison,
)
from consdetect.core.network import ConsensusKernel
from consdetect.core.observation import DerivedStats, derive_stats
from consdetect.core.theory import SwitchingFusionSpec, exact_switching_fusion_alpha, isolated_rate_ceiling

logger = getLogger(__name__)

H1_STREAM_OFFSET = 2**31
MIN_ERRORS = 10
_MB = 1024 * 1024

Job = tuple[ExperimentConfig, int, int, int]


def path_seed(cfg: ExperimentConfig, hypothesis: int, path: int) -> RngSeed:
    base = cfg.stream_offset + (H1_STREAM_OFFSET if hypothesis == 1 else 0)
    return RngSeed(master_seed=cfg.master_seed, stream_index=base + path)


def estimate_chunk_bytes(cfg: ExperimentConfig) -> int:
    """Peak bytes held by one chunk: stacked eta and link flags plus one path's raw draws."""
    n, k_max = cfg.model.n, cfg.k_max
    draws = ConsensusKernel(cfg.weights).draws_per_step
    per_path = k_max * n * 8 + (k_max - 1) * draws
    transient = k_max * n * 8 * 2 + (k_max - 1) * draws * 8
    return cfg.chunk_size * per_path + transient


def simulate_paths(
    cfg: ExperimentConfig, hypothesis: int, start: int, stop: int, record: bool = False
) -> tuple[np.ndarray, Optional[FloatArray]]:
    """Run paths [start, stop) under one hypothesis.

    Returns per-(checkpoint, recorded sensor) error counts and, when `record`
    is set, the full (paths, k_max, N) trajectories.
    """
    stats = derive_stats(cfg.model)
    kernel = ConsensusKernel(cfg.weights)
    factor = psd_factor(stats.s_eta)
    mean = stats.eta_mean(hypothesis)
    n, k_max, batch = cfg.model.n, cfg.k_max, stop - start
    draws = kernel.draws_per_step

    eta = np.empty((batch, k_max, n))
    flags = np.empty((batch, max(k_max - 1, 0), draws), dtype=bool)
    for b in range(batch):
        gen = path_seed(cfg, hypothesis, start + b).generator()
        eta[b] = mean + gen.standard_normal((k_max, n)) @ factor.T
        flags[b] = kernel.realize(gen.random((k_max - 1, draws)))

    checkpoints = {k: idx for idx, k in enumerate(cfg.checkpoint_list())}
    sensors = np.array(cfg.sensors(), dtype=np.intp) - 1
    counts = np.zeros((len(checkpoints), sensors.size), dtype=np.int64)
    traj = np.empty((batch, k_max, n)) if record else None

    x = eta[:, 0, :].copy()
    for k in range(1, k_max + 1):
        if traj is not None:
            traj[:, k - 1, :] = x
        if k in checkpoints:
            watched = x[:, sensors]
            wrong = watched > 0 if hypothesis == 0 else watched <= 0
            counts[checkpoints[k]] = wrong.sum(axis=0)
        if k == k_max:
            break
        x = (k / (k + 1)) * kernel.apply(x, flags[:, k - 1]) + eta[:, k] / (k + 1)
    return counts, traj


def _run_chunk(job: Job) -> tuple[int, np.ndarray]:
    cfg, hypothesis, start, stop = job
    counts, _ = simulate_paths(cfg, hypothesis, start, stop)
    return hypothesis, counts


def _jobs(cfg: ExperimentConfig, hypotheses: Iterable[int]) -> list[Job]:
    total = cfg.paths_per_hypothesis
    return [
        (cfg, hyp, start, min(start + cfg.chunk_size, total))
        for hyp in hypotheses
        for start in range(0, total, cfg.chunk_size)
    ]


def wilson_interval(n_errors: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n < 1 or not 0 <= n_errors <= n:
        msg = f"need 0 <= n_errors <= n and n >= 1, got {n_errors}/{n}"
        raise ValueError(msg)
    z = float(sps.norm.ppf(0.5 + confidence / 2.0))
    p = n_errors / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2.0 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom
    return min(max(0.0, center - half), p), max(min(1.0, center + half), p)


def run_experiment(
    cfg: ExperimentConfig, workers: int = 1, progress: Optional[Callable[[int], None]] = None
) -> list[ErrorCurve]:
    """Estimate per-sensor error probabilities at every checkpoint.

    With the zero threshold alpha equals beta, so by default only H0 paths
    are simulated and P_e = alpha. `estimate_both_hypotheses` simulates H1 too
    and weighs the two error rates by the priors.
    """
    needed = estimate_chunk_bytes(cfg)
    if needed > cfg.memory_budget_mb * _MB:
        msg = (
            f"one chunk needs {needed / _MB:.1f} MB but the memory budget is {cfg.memory_budget_mb} MB; "
            "lower chunk_size or k_max"
        )
        raise ConfigError(msg)
    if workers < 1:
        msg = f"workers must be >= 1, got {workers}"
        raise ConfigError(msg)

    hypotheses = (0, 1) if cfg.estimate_both_hypotheses else (0,)
    jobs = _jobs(cfg, hypotheses)
    n_ck, n_sensors = len(cfg.checkpoint_list()), len(cfg.sensors())
    totals = {hyp: np.zeros((n_ck, n_sensors), dtype=np.int64) for hyp in hypotheses}
    logger.info(
        "Running %d paths per hypothesis to k=%d on %d worker(s), config %s",
        cfg.paths_per_hypothesis,
        cfg.k_max,
        workers,
        cfg.config_hash()[:12],
    )
    started = time.perf_counter()

    def collect(results: Iterable[tuple[int, np.ndarray]]) -> None:
        for (_, _, start, stop), (hyp, counts) in zip(jobs, results):
            totals[hyp] += counts
            if progress is not None:
                progress(stop - start)

    if workers == 1:
        collect(map(_run_chunk, jobs))
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            collect(executor.map(_run_chunk, jobs))

    logger.info("Finished %d chunks in %.2fs", len(jobs), time.perf_counter() - started)
    return _curves_from_counts(cfg, totals)


def _curves_from_counts(cfg: ExperimentConfig, totals: dict[int, np.ndarray]) -> list[ErrorCurve]:
    """Turn error counts into curves.

    The H0-only interval is a Wilson interval. The two-hypothesis interval
    weighs the per-hypothesis Wilson bounds by the priors; it brackets p_hat
    but is not itself a Wilson interval.
    """
    paths = cfg.paths_per_hypothesis
    ks = cfg.checkpoint_list()
    both = 1 in totals
    pi0 = cfg.model.prior_h0
    curves = []
    for col, sensor in enumerate(cfg.sensors()):
        points = []
        for row, k in enumerate(ks):
            e0 = int(totals[0][row, col])
            if not both:
                low, high = wilson_interval(e0, paths)
                points.append(ErrorPoint(k=k, p_hat=e0 / paths, ci_low=low, ci_high=high, n_errors=e0, n_paths=paths))
                continue
            e1 = int(totals[1][row, col])
            points.append(_two_hypothesis_point(k, e0, paths, e1, paths, pi0))
        if both:
            curves.append(ErrorCurve(sensor=sensor, points=tuple(points), estimator="two_hypothesis", prior_h0=pi0))
        else:
            curves.append(ErrorCurve(sensor=sensor, points=tuple(points)))
    return curves


def _two_hypothesis_point(k: int, e0: int, n0: int, e1: int, n1: int, pi0: float) -> ErrorPoint:
    pi1 = 1.0 - pi0
    lo0, hi0 = wilson_interval(e0, n0)
    lo1, hi1 = wilson_interval(e1, n1)
    p_hat = pi0 * e0 / n0 + pi1 * e1 / n1
    return ErrorPoint(
        k=k,
        p_hat=p_hat,
        ci_low=min(pi0 * lo0 + pi1 * lo1, p_hat),
        ci_high=max(pi0 * hi0 + pi1 * hi1, p_hat),
        n_errors=e0,
        n_paths=n0,
        n_errors_h1=e1,
        n_paths_h1=n1,
    )


def run_trajectories(cfg: ExperimentConfig, n_paths: int) -> FloatArray:
    """Full decision-variable trajectories of the first `n_paths` H0 paths."""
    n_paths = min(n_paths, cfg.paths_per_hypothesis)
    _, traj = simulate_paths(cfg, 0, 0, n_paths, record=True)
    return traj if traj is not None else np.empty((0, cfg.k_max, cfg.model.n))


def default_window(curve: ErrorCurve) -> tuple[int, int]:
    k_last = int(curve.ks().max())
    return max(1, math.ceil(k_last / 4)), k_last


def fit_decay_rate(
    curve: ErrorCurve, window: Optional[tuple[int, int]] = None, method: FitMethod = "regression_slope"
) -> RateFit:
    """Decay rate of p_hat(k) over a window of checkpoints.

    Only checkpoints with at least MIN_ERRORS observed errors are used (points
    without counts, such as exact curves, only need p_hat > 0).
    """
    lo, hi = window or default_window(curve)
    usable = [
        pt
        for pt in curve.points
        if lo <= pt.k <= hi and pt.p_hat > 0 and (pt.total_errors is None or pt.total_errors >= MIN_ERRORS)
    ]
    if len(usable) < 3:
        msg = f"sensor {curve.sensor}: only {len(usable)} usable checkpoints in [{lo}, {hi}], need 3"
        raise InsufficientDataError(msg, usable=len(usable))
    source: FitSource = "exact" if curve.estimator == "exact" else "monte_carlo"
    if method == "endpoint":
        last = usable[-1]
        rate = -math.log(last.p_hat) / last.k
        stderr = 0.0
        if last.total_paths is not None:
            stderr = math.sqrt((1.0 - last.p_hat) / (last.total_paths * last.p_hat)) / last.k
        return RateFit(
            sensor=curve.sensor,
            fitted_rate=rate,
            window=(lo, hi),
            stderr=stderr,
            method=method,
            n_points=len(usable),
            source=source,
        )
    ks = np.array([pt.k for pt in usable], dtype=np.float64)
    neg_log = -np.log([pt.p_hat for pt in usable])
    fit = sps.linregress(ks, neg_log)
    return RateFit(
        sensor=curve.sensor,
        fitted_rate=float(fit.slope),
        window=(lo, hi),
        stderr=float(fit.stderr),
        method=method,
        n_points=len(usable),
        source=source,
    )


def _exact_curve(sensor: int, ks: Sequence[int], p_of_k: Callable[[int], float]) -> ErrorCurve:
    points = []
    for k in ks:
        p = p_of_k(k)
        points.append(ErrorPoint(k=k, p_hat=p, ci_low=p, ci_high=p))
    return ErrorCurve(sensor=sensor, points=tuple(points), estimator="exact")


def exact_switching_fusion_curve(spec: SwitchingFusionSpec, ks: Sequence[int], sensor: int = 1) -> ErrorCurve:
    return _exact_curve(sensor, ks, lambda k: math.exp(exact_switching_fusion_alpha(spec, k)))


def centralized_curve(stats: DerivedStats, ks: Sequence[int]) -> ErrorCurve:
    return _exact_curve(0, ks, lambda k: centralized_error_probability(stats, k))


def no_cooperation_curve(model: ObservationModel, i: int, ks: Sequence[int]) -> ErrorCurve:
    return _exact_curve(i, ks, lambda k: no_cooperation_error_probability(model, i, k))


def average_curve(curves: Sequence[ErrorCurve]) -> ErrorCurve:
    """Network-average error curve, reported as sensor 0.

    Counted curves are pooled per hypothesis, so the average keeps the count
    identity of its estimator; exact curves average their probabilities.
    """
    if not curves:
        msg = "cannot average an empty set of curves"
        raise ValueError(msg)
    ks = [pt.k for pt in curves[0].points]
    if any([pt.k for pt in c.points] != ks for c in curves):
        msg = "curves must share the same checkpoints"
        raise ValueError(msg)
    first = curves[0]
    if any(c.estimator != first.estimator or c.prior_h0 != first.prior_h0 for c in curves):
        msg = "curves must share the same estimator and prior"
        raise ValueError(msg)
    points = []
    for idx, k in enumerate(ks):
        column = [c.points[idx] for c in curves]
        low = float(np.mean([pt.ci_low for pt in column]))
        high = float(np.mean([pt.ci_high for pt in column]))
        if not all(pt.counted for pt in column):
            p_hat = float(np.mean([pt.p_hat for pt in column]))
            points.append(ErrorPoint(k=k, p_hat=p_hat, ci_low=min(low, p_hat), ci_high=max(high, p_hat)))
            continue
        e0 = sum(pt.n_errors or 0 for pt in column)
        n0 = sum(pt.n_paths or 0 for pt in column)
        if first.estimator == "two_hypothesis":
            e1 = sum(pt.n_errors_h1 or 0 for pt in column)
            n1 = sum(pt.n_paths_h1 or 0 for pt in column)
            pooled = _two_hypothesis_point(k, e0, n0, e1, n1, first.prior_h0 or 0.5)
            points.append(
                pooled.model_copy(update={"ci_low": min(low, pooled.p_hat), "ci_high": max(high, pooled.p_hat)})
            )
            continue
        p_hat = e0 / n0
        points.append(
            ErrorPoint(k=k, p_hat=p_hat, ci_low=min(low, p_hat), ci_high=max(high, p_hat), n_errors=e0, n_paths=n0)
        )
    return ErrorCurve(sensor=0, points=tuple(points), estimator=first.estimator, prior_h0=first.prior_h0)


def fit_or_censor(
    curve: ErrorCurve, window: Optional[tuple[int, int]], fallback: Optional[ErrorCurve] = None
) -> tuple[Optional[RateFit], bool]:
    """Fit a curve; when it has too few errors, fall back to an exact curve if one is given."""
    try:
        return fit_decay_rate(curve, window), False
    except InsufficientDataError as err:
        logger.warning("Rate fit censored: %s", err)
    if fallback is None:
        return None, True
    try:
        fit = fit_decay_rate(fallback, window)
    except InsufficientDataError:
        return None, True
    return fit.model_copy(update={"sensor": curve.sensor}), True


def compare_report(
    curves: Sequence[ErrorCurve],
    theory: RateReport,
    window: Optional[tuple[int, int]] = None,
    tolerance: float = 0.2,
    fallback: Optional[ErrorCurve] = None,
) -> ComparisonReport:
    """Put fitted rates next to the theoretical rate or bound and the two baselines."""
    rows = []
    for curve in curves:
        fit, censored = fit_or_censor(curve, window, fallback)
        c_i = theory.sensor_chernoff.get(curve.sensor)
        p_i = theory.sensor_connectivity.get(curve.sensor)
        ceiling = isolated_rate_ceiling(c_i, p_i) if c_i is not None and p_i is not None else None
        necessary = theory.sensor_necessary.get(curve.sensor, theory.necessary_condition_met)
        rows.append(
            SensorComparison(
                sensor=curve.sensor,
                empirical_rate=fit.fitted_rate if fit else None,
                stderr=fit.stderr if fit else None,
                fit_source=fit.source if fit else None,
                theory_rate=theory.theoretical_rate_or_bound,
                regime=theory.regime,
                sufficient_met=theory.sufficient_condition_met,
                necessary_met=necessary,
                centralized_rate=theory.c_tot,
                no_cooperation_rate=c_i,
                isolated_ceiling=ceiling if ceiling is not None and math.isfinite(ceiling) else None,
                censored=censored,
                passed=_passes(fit, theory, tolerance, ceiling),
            )
        )
    return ComparisonReport(theory=_with_empirical_rate(theory, rows), sensors=tuple(rows))


def _with_empirical_rate(theory: RateReport, rows: Sequence[SensorComparison]) -> RateReport:
    """The network-average fit when there is one, else the mean of the per-sensor fits."""
    fitted = {row.sensor: row.empirical_rate for row in rows if row.empirical_rate is not None}
    if not fitted:
        return theory
    rate = fitted[0] if 0 in fitted else float(np.mean(list(fitted.values())))
    return theory.model_copy(update={"empirical_rate": rate})


def _passes(fit: Optional[RateFit], theory: RateReport, tolerance: float, ceiling: Optional[float]) -> Optional[bool]:
    if fit is None:
        return None
    rate, slack = fit.fitted_rate, 2.0 * fit.stderr
    target = theory.theoretical_rate_or_bound
    if theory.exact or theory.sufficient_condition_met:
        ok = abs(rate - target) <= tolerance * target + slack
    else:
        ok = rate >= target * (1.0 - tolerance) - slack
    if ceiling is not None and math.isfinite(ceiling):
        ok = ok and rate <= ceiling + slack
    return ok
