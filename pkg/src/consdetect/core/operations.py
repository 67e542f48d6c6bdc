import json
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Literal, Optional, Protocol, TypeVar, Union

import networkx as nx
import numpy as np
from pydantic import BaseModel
from slugify import slugify

import consdetect
from consdetect.core.artifacts.manager import ArtifactStore, Cell
from consdetect.core.detectors import no_cooperation_error_probability
from consdetect.core.errors import ConfigError, DomainError
from consdetect.core.gaussian import RngSeed
from consdetect.core.models import (
    ComparisonReport,
    ErrorCurve,
    ExperimentConfig,
    LinkFailureMetropolis,
    ObservationModel,
    RateReport,
    Regime,
    RunManifest,
    Supergraph,
    SwitchingFusion,
    TheoryConfig,
)
from consdetect.core.montecarlo import (
    average_curve,
    centralized_curve,
    compare_report,
    exact_switching_fusion_curve,
    run_experiment,
    run_trajectories,
)
from consdetect.core.network import (
    connectivity_probability,
    geometric_supergraph,
    pendant_supergraph,
    radius_for_edge_count,
    spectral_r,
)
from consdetect.core.observation import DerivedStats, derive_stats, equivalent_uncorrelated_model
from consdetect.core.provenance import SourceRevision, current_revision
from consdetect.core.theory import (
    SwitchingFusionSpec,
    Theorem2Inputs,
    equal_sensor_chernoff,
    phi_star,
    theorem1_log_r_threshold,
    theorem1_optimality_threshold,
    theorem2_bound_interval,
    theorem2_log_r_threshold,
    theorem2_rate_bound,
    theorem2_regime,
    theorem3_necessary,
)

logger = getLogger(__name__)

WeightModelT = Union[SwitchingFusion, LinkFailureMetropolis]
SweepVariable = Literal["q", "p", "q_pendant"]
TheoryVariable = Literal["p", "q", "r"]
M = TypeVar("M", bound=BaseModel)

SWEEP_STREAM_STRIDE = 2**32
R_STREAM = 2**32 - 1

CURVE_COLUMNS = ("sensor", "k", "p_hat", "ci_low", "ci_high", "n_errors", "n_paths", "n_errors_h1", "n_paths_h1")
RATE_COLUMNS = ("sensor", "empirical_rate", "stderr", "theory_rate", "regime", "sufficient_met", "necessary_met")
BASELINE_COLUMNS = ("k", "centralized", "no_cooperation_mean")
TRAJECTORY_COLUMNS = ("path", "k", "sensor", "x")
SWEEP_COLUMNS = (
    "value",
    "sensor",
    "empirical_rate",
    "stderr",
    "theory_rate",
    "regime",
    "sufficient_met",
    "necessary_met",
    "censored",
)
SUMMARY_COLUMNS = ("value", "r", "r_stderr", "avg_curve_rate", "avg_curve_stderr", "theory_rate", "regime")
THEORY_COLUMNS = (
    "r",
    "rate_or_bound",
    "kind",
    "regime",
    "sufficient_met",
    "necessary_met",
    "p_star",
    "log_r_threshold",
    "theorem2_bound",
    "theorem2_log_r_threshold",
)


def apply_overrides(document: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """Apply `dotted.path=value` overrides; values are parsed as JSON when possible."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            msg = f"override must look like key=value, got {item!r}"
            raise ConfigError(msg)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node: Any = document
        for part in parts[:-1]:
            node = node[int(part)] if isinstance(node, list) else node.setdefault(part, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return document


def load_document(path: Path, model: type[M], overrides: Sequence[str] = ()) -> M:
    """Read a JSON config, apply overrides and validate it against `model`."""
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        msg = f"cannot read config {path}: {err}"
        raise ConfigError(msg) from err
    if not isinstance(document, dict):
        msg = f"config {path} must hold a JSON object"
        raise ConfigError(msg)
    return model.model_validate(apply_overrides(document, overrides))


def _sensor_maps(
    stats: DerivedStats, weights: WeightModelT
) -> tuple[dict[int, float], dict[int, float], dict[int, bool]]:
    if stats.c_i is None:
        return {}, {}, {}
    chernoff = {i + 1: float(c) for i, c in enumerate(stats.c_i) if c > 0}
    connectivity = {i: connectivity_probability(weights, i) for i in chernoff}
    necessary = {i: theorem3_necessary(stats.c_tot, chernoff[i], connectivity[i]) for i in chernoff}
    return chernoff, connectivity, necessary


def build_rate_report(
    model: ObservationModel, weights: WeightModelT, r_samples: int = 10_000, seed: Optional[RngSeed] = None
) -> RateReport:
    """Theory side of an experiment: exact rate for switching fusion, lower bound otherwise."""
    stats = derive_stats(model)
    chernoff, connectivity, necessary = _sensor_maps(stats, weights)
    necessary_all = all(necessary.values()) if necessary else None
    if isinstance(weights, SwitchingFusion):
        c_i = equal_sensor_chernoff(stats)
        if c_i is None:
            logger.warning("Sensors are not equal and uncorrelated; switching-fusion rate is approximate")
        spec = SwitchingFusionSpec.from_total(model.n, stats.c_tot, weights.p)
        rate, regime = phi_star(spec)
        return RateReport(
            theoretical_rate_or_bound=rate,
            regime=regime,
            sufficient_condition_met=regime == "optimal",
            necessary_condition_met=necessary_all,
            exact=c_i is not None,
            c_tot=stats.c_tot,
            r=1.0 - weights.p,
            r_stderr=0.0,
            log_r_threshold=theorem1_log_r_threshold(spec),
            sensor_chernoff=chernoff,
            sensor_connectivity=connectivity,
            sensor_necessary=necessary,
        )

    r, r_stderr = spectral_r(weights, r_samples, seed)
    if not 0.0 <= r <= 1.0:
        logger.warning("Estimated r=%.6g outside [0, 1]; clamping", r)
        r = min(max(r, 0.0), 1.0)
    inp = Theorem2Inputs.from_stats(stats, r)
    bound, optimal = theorem2_rate_bound(inp)
    return RateReport(
        theoretical_rate_or_bound=bound,
        regime=theorem2_regime(inp),
        sufficient_condition_met=optimal,
        necessary_condition_met=necessary_all,
        c_tot=stats.c_tot,
        r=r,
        r_stderr=r_stderr if math.isfinite(r_stderr) else None,
        log_r_threshold=theorem2_log_r_threshold(inp),
        bound_interval=theorem2_bound_interval(inp, r_stderr),
        sensor_chernoff=chernoff,
        sensor_connectivity=connectivity,
        sensor_necessary=necessary,
    )


class TheoryRow(BaseModel):
    value: float
    r: float
    rate_or_bound: float
    kind: Literal["exact_rate", "bound"]
    regime: Regime
    sufficient_met: bool
    necessary_met: Optional[bool] = None
    p_star: Optional[float] = None
    log_r_threshold: Optional[float] = None
    theorem2_bound: Optional[float] = None
    theorem2_log_r_threshold: Optional[float] = None

    def cells(self) -> list[Cell]:
        return [self.value, *(getattr(self, name) for name in THEORY_COLUMNS)]


class TheoryProtocol(Protocol):
    def default_variable(self) -> TheoryVariable: ...
    def rows(self, variable: TheoryVariable, grid: Sequence[float]) -> list[TheoryRow]: ...


class TheoryService:
    def __init__(self, config: TheoryConfig):
        self.config = config

    def default_variable(self) -> TheoryVariable:
        if self.config.theorem2 is not None:
            return "r"
        if isinstance(self.config.weights, LinkFailureMetropolis):
            return "q"
        return "p"

    def rows(self, variable: TheoryVariable, grid: Sequence[float]) -> list[TheoryRow]:
        """Evaluate the theory at every grid value of `variable`."""
        if not grid:
            msg = "the sweep grid is empty"
            raise ConfigError(msg)
        cfg = self.config
        if cfg.switching_fusion is not None:
            if variable not in ("p", "r"):
                msg = f"a switching_fusion config sweeps p or r, not {variable}"
                raise ConfigError(msg)
            spec = SwitchingFusionSpec.from_total(cfg.switching_fusion.n, cfg.switching_fusion.c_tot, 0.0)
            equivalent = derive_stats(equivalent_uncorrelated_model(spec.n, spec.c_i))
            return [self._switching_row(spec, equivalent, v, variable) for v in grid]
        if cfg.theorem2 is not None:
            if variable != "r":
                msg = f"a theorem2 config sweeps r, not {variable}"
                raise ConfigError(msg)
            return [self._theorem2_row(Theorem2Inputs.from_config(cfg.theorem2, v), v) for v in grid]

        if cfg.model is None or cfg.weights is None:
            msg = "theory config names no source"
            raise ConfigError(msg)
        stats = derive_stats(cfg.model)
        if variable == "r":
            return [self._theorem2_row(Theorem2Inputs.from_stats(stats, v), v) for v in grid]
        if isinstance(cfg.weights, SwitchingFusion):
            if variable != "p":
                msg = f"switching-fusion weights sweep p or r, not {variable}"
                raise ConfigError(msg)
            return [self._model_row(cfg.model, stats, SwitchingFusion(N=cfg.model.n, p=v), v) for v in grid]
        if variable != "q":
            msg = f"link-failure weights sweep q or r, not {variable}"
            raise ConfigError(msg)
        graph = cfg.weights.graph
        return [
            self._model_row(cfg.model, stats, LinkFailureMetropolis(graph=graph.with_uniform_q(v)), v, index)
            for index, v in enumerate(grid)
        ]

    def _switching_row(
        self, base: SwitchingFusionSpec, equivalent: DerivedStats, value: float, variable: TheoryVariable
    ) -> TheoryRow:
        p = value if variable == "p" else 1.0 - value
        spec = base.with_p(p)
        rate, regime = phi_star(spec)
        inp = Theorem2Inputs.from_stats(equivalent, 1.0 - p)
        bound, _ = theorem2_rate_bound(inp)
        return TheoryRow(
            value=value,
            r=1.0 - p,
            rate_or_bound=rate,
            kind="exact_rate",
            regime=regime,
            sufficient_met=regime == "optimal",
            necessary_met=theorem3_necessary(spec.c_tot, spec.c_i, p) if spec.n > 1 else True,
            p_star=theorem1_optimality_threshold(spec),
            log_r_threshold=theorem1_log_r_threshold(spec),
            theorem2_bound=bound,
            theorem2_log_r_threshold=theorem2_log_r_threshold(inp),
        )

    def _theorem2_row(self, inp: Theorem2Inputs, value: float) -> TheoryRow:
        bound, optimal = theorem2_rate_bound(inp)
        threshold = theorem2_log_r_threshold(inp)
        return TheoryRow(
            value=value,
            r=inp.r,
            rate_or_bound=bound,
            kind="bound",
            regime=theorem2_regime(inp),
            sufficient_met=optimal,
            log_r_threshold=threshold,
            theorem2_bound=bound,
            theorem2_log_r_threshold=threshold,
        )

    def _model_row(
        self, model: ObservationModel, stats: DerivedStats, weights: WeightModelT, value: float, index: int = 0
    ) -> TheoryRow:
        seed = RngSeed(master_seed=self.config.master_seed, stream_index=index * SWEEP_STREAM_STRIDE + R_STREAM)
        report = build_rate_report(model, weights, self.config.r_samples, seed)
        inp = Theorem2Inputs.from_stats(stats, report.r if report.r is not None else 1.0)
        bound, _ = theorem2_rate_bound(inp)
        p_star = None
        if isinstance(weights, SwitchingFusion):
            p_star = theorem1_optimality_threshold(SwitchingFusionSpec.from_total(model.n, stats.c_tot, weights.p))
        return TheoryRow(
            value=value,
            r=inp.r,
            rate_or_bound=report.theoretical_rate_or_bound,
            kind="exact_rate" if isinstance(weights, SwitchingFusion) else "bound",
            regime=report.regime,
            sufficient_met=report.sufficient_condition_met,
            necessary_met=report.necessary_condition_met,
            p_star=p_star,
            log_r_threshold=report.log_r_threshold,
            theorem2_bound=bound,
            theorem2_log_r_threshold=theorem2_log_r_threshold(inp),
        )


@dataclass(frozen=True)
class GraphSummary:
    n: int
    m: int
    degrees: list[int]
    connected: bool
    isolated: list[int]


class GraphService:
    def geometric(
        self,
        n: int,
        q: float,
        seed: RngSeed,
        radius: Optional[float] = None,
        target_m: Optional[int] = None,
    ) -> Supergraph:
        if (radius is None) == (target_m is None):
            msg = "give exactly one of radius or target_m"
            raise ConfigError(msg)
        if target_m is not None:
            radius, achieved = radius_for_edge_count(n, target_m, seed)
            logger.info("Radius %.6f gives M=%d", radius, achieved)
        return geometric_supergraph(n, float(radius or 0.0), q, seed)

    def pendant(
        self,
        n: int,
        pendant: int,
        anchor: int,
        q_pendant: float,
        q_rest: float,
        seed: RngSeed,
        radius: Optional[float] = None,
        target_m: Optional[int] = None,
    ) -> Supergraph:
        if radius is not None and target_m is not None:
            msg = "give at most one of radius or target_m"
            raise ConfigError(msg)
        if target_m is not None:
            radius, _ = radius_for_edge_count(n - 1, target_m, seed)
        return pendant_supergraph(n, pendant, anchor, q_pendant, q_rest, seed, radius=0.4 if radius is None else radius)

    def summary(self, graph: Supergraph) -> GraphSummary:
        g = graph.to_networkx()
        degrees = [int(d) for _, d in sorted(g.degree())]
        return GraphSummary(
            n=graph.n,
            m=graph.m,
            degrees=degrees,
            connected=bool(nx.is_connected(g)),
            isolated=[node for node, d in sorted(g.degree()) if d == 0],
        )

    def save(self, graph: Supergraph, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(graph.model_dump_json(indent=2, by_alias=True) + "\n", encoding="utf-8")
        return path


@dataclass
class SimulationOutcome:
    curves: list[ErrorCurve]
    report: RateReport
    comparison: ComparisonReport
    manifest: RunManifest


class SimulationProtocol(Protocol):
    def run(
        self, cfg: ExperimentConfig, output_dir: Path, trajectories: int = 0, command: str = "simulate"
    ) -> SimulationOutcome: ...


def _provenance(cfg: ExperimentConfig) -> dict[str, Cell]:
    return {"config_hash": cfg.config_hash(), "master_seed": cfg.master_seed, "stream_offset": cfg.stream_offset}


class SimulationService:
    def __init__(
        self,
        workers: int = 1,
        progress: Optional[Callable[[int], None]] = None,
        revision: Optional[SourceRevision] = None,
    ) -> None:
        self.workers = workers
        self.progress = progress
        self.revision = revision if revision is not None else current_revision()

    def run(
        self, cfg: ExperimentConfig, output_dir: Path, trajectories: int = 0, command: str = "simulate"
    ) -> SimulationOutcome:
        """Run one experiment and write curves, rates, baselines, comparison and manifest."""
        started = time.perf_counter()
        r_seed = RngSeed(master_seed=cfg.master_seed, stream_index=cfg.stream_offset + R_STREAM)
        report = build_rate_report(cfg.model, cfg.weights, cfg.r_samples, r_seed)
        sensor_curves = run_experiment(cfg, workers=self.workers, progress=self.progress)
        curves = [average_curve(sensor_curves), *sensor_curves]

        fallback = None
        if isinstance(cfg.weights, SwitchingFusion) and report.exact:
            spec = SwitchingFusionSpec.from_total(cfg.model.n, report.c_tot, cfg.weights.p)
            fallback = exact_switching_fusion_curve(spec, cfg.checkpoint_list())
        comparison = compare_report(curves, report, cfg.fit_window, cfg.rate_tolerance, fallback)

        store = ArtifactStore(output_dir, _provenance(cfg))
        store.write_csv("curves.csv", CURVE_COLUMNS, _curve_rows(curves))
        store.write_csv("rates.csv", RATE_COLUMNS, _rate_rows(comparison))
        store.write_csv("baselines.csv", BASELINE_COLUMNS, _baseline_rows(cfg))
        store.write_json("comparison.json", comparison)
        if trajectories > 0:
            store.write_csv("trajectories.csv", TRAJECTORY_COLUMNS, _trajectory_rows(cfg, trajectories))

        manifest = RunManifest(
            command=command,
            config_hash=cfg.config_hash(),
            master_seed=cfg.master_seed,
            stream_offset=cfg.stream_offset,
            workers=self.workers,
            wall_time_s=time.perf_counter() - started,
            version=consdetect.__version__,
            source_revision=self.revision.sha,
            source_dirty=self.revision.dirty,
            outputs=(*store.written, "manifest.json"),
        )
        store.write_json("manifest.json", manifest)
        return SimulationOutcome(curves=curves, report=comparison.theory, comparison=comparison, manifest=manifest)


def _curve_rows(curves: Sequence[ErrorCurve]) -> list[list[Cell]]:
    return [
        [c.sensor, pt.k, pt.p_hat, pt.ci_low, pt.ci_high, pt.n_errors, pt.n_paths, pt.n_errors_h1, pt.n_paths_h1]
        for c in curves
        for pt in c.points
    ]


def _rate_rows(comparison: ComparisonReport) -> list[list[Cell]]:
    return [
        [s.sensor, s.empirical_rate, s.stderr, s.theory_rate, s.regime, s.sufficient_met, s.necessary_met]
        for s in comparison.sensors
    ]


def _baseline_rows(cfg: ExperimentConfig) -> list[list[Cell]]:
    ks = cfg.checkpoint_list()
    stats = derive_stats(cfg.model)
    central = centralized_curve(stats, ks).p_hats()
    informative = [i for i in cfg.sensors() if stats.c_i is not None and stats.c_i[i - 1] > 0]
    rows: list[list[Cell]] = []
    for idx, k in enumerate(ks):
        no_coop: Optional[float] = None
        if informative:
            no_coop = float(np.mean([no_cooperation_error_probability(cfg.model, i, k) for i in informative]))
        rows.append([k, float(central[idx]), no_coop])
    return rows


def _trajectory_rows(cfg: ExperimentConfig, n_paths: int) -> list[list[Cell]]:
    traj = run_trajectories(cfg, n_paths)
    return [
        [path, k + 1, sensor + 1, float(traj[path, k, sensor])]
        for path in range(traj.shape[0])
        for k in range(traj.shape[1])
        for sensor in range(traj.shape[2])
    ]


@dataclass(frozen=True)
class SweepPoint:
    value: float
    output_dir: Path
    outcome: SimulationOutcome


class SweepService:
    def __init__(self, simulation: SimulationService):
        self.simulation = simulation

    def point_config(
        self,
        base: ExperimentConfig,
        variable: SweepVariable,
        value: float,
        index: int,
        pendant: Optional[int] = None,
        anchor: Optional[int] = None,
    ) -> ExperimentConfig:
        """Config of grid point `index`: the swept weight model and a disjoint block of streams."""
        weights: WeightModelT
        if variable == "p":
            if not isinstance(base.weights, SwitchingFusion):
                msg = "sweeping p needs switching-fusion weights"
                raise ConfigError(msg)
            weights = SwitchingFusion(N=base.weights.n, p=value)
        elif not isinstance(base.weights, LinkFailureMetropolis):
            msg = f"sweeping {variable} needs link-failure weights"
            raise ConfigError(msg)
        elif variable == "q":
            weights = LinkFailureMetropolis(graph=base.weights.graph.with_uniform_q(value))
        else:
            if pendant is None or anchor is None:
                msg = "sweeping q_pendant needs --pendant and --anchor"
                raise ConfigError(msg)
            try:
                weights = LinkFailureMetropolis(graph=base.weights.graph.with_edge_q(pendant, anchor, value))
            except ValueError as err:
                raise DomainError(str(err)) from err
        offset = base.stream_offset + index * SWEEP_STREAM_STRIDE
        return base.model_copy(update={"weights": weights, "stream_offset": offset})

    def run(
        self,
        base: ExperimentConfig,
        variable: SweepVariable,
        grid: Sequence[float],
        output_dir: Path,
        pendant: Optional[int] = None,
        anchor: Optional[int] = None,
    ) -> list[SweepPoint]:
        if not grid:
            msg = "the sweep grid is empty"
            raise ConfigError(msg)
        configs = [self.point_config(base, variable, v, i, pendant, anchor) for i, v in enumerate(grid)]
        points = []
        for index, (value, cfg) in enumerate(zip(grid, configs)):
            point_dir = output_dir / slugify(f"{index:03d} {variable} {value}")
            logger.info("Sweep point %d/%d: %s=%s", index + 1, len(grid), variable, value)
            outcome = self.simulation.run(cfg, point_dir, command=f"sweep {variable}")
            points.append(SweepPoint(value=value, output_dir=point_dir, outcome=outcome))

        store = ArtifactStore(output_dir, {**_provenance(base), "variable": variable})
        store.write_csv("sweep.csv", SWEEP_COLUMNS, _sweep_rows(points))
        store.write_csv("sweep_summary.csv", SUMMARY_COLUMNS, _summary_rows(points))
        return points


def _sweep_rows(points: Sequence[SweepPoint]) -> list[list[Cell]]:
    return [
        [
            pt.value,
            s.sensor,
            s.empirical_rate,
            s.stderr,
            s.theory_rate,
            s.regime,
            s.sufficient_met,
            s.necessary_met,
            s.censored,
        ]
        for pt in points
        for s in pt.outcome.comparison.sensors
    ]


def _summary_rows(points: Sequence[SweepPoint]) -> list[list[Cell]]:
    rows: list[list[Cell]] = []
    for pt in points:
        report = pt.outcome.report
        average = next(s for s in pt.outcome.comparison.sensors if s.sensor == 0)
        rows.append(
            [
                pt.value,
                report.r,
                report.r_stderr,
                average.empirical_rate,
                average.stderr,
                report.theoretical_rate_or_bound,
                report.regime,
            ]
        )
    return rows
