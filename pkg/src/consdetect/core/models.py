import hashlib
import math
from typing import Annotated, Literal, Optional, Union

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from consdetect.core.gaussian import UINT64_MAX, FloatArray, RngSeed, check_spd, generate_random_covariance

Regime = Literal["optimal", "suboptimal_branch", "individual_branch"]
Estimator = Literal["h0_symmetry", "two_hypothesis", "exact"]
FitMethod = Literal["regression_slope", "endpoint"]
FitSource = Literal["monte_carlo", "exact"]


class RandomCovariance(BaseModel):
    """Seeded recipe for a random covariance alpha_S * Q Diag(u) Q^T."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    alpha_s: float = Field(alias="alpha_S", gt=0.0)
    seed: int = Field(default=0, ge=0, le=UINT64_MAX)

    def draw(self, n: int) -> tuple[tuple[float, ...], ...]:
        cov = generate_random_covariance(n, self.alpha_s, RngSeed(master_seed=self.seed))
        return tuple(tuple(float(x) for x in row) for row in cov)


class ObservationModel(BaseModel):
    """Two-hypothesis Gaussian sensing model y(k) = m_l + noise, noise ~ N(0, S)."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    n: int = Field(alias="N", ge=1)
    m0: tuple[float, ...]
    m1: tuple[float, ...]
    cov: tuple[tuple[float, ...], ...] = Field(alias="S")
    prior_h0: float = Field(default=0.5, gt=0.0, lt=1.0)
    random_covariance: Optional[RandomCovariance] = None

    @model_validator(mode="before")
    @classmethod
    def _draw_covariance(cls, data: object) -> object:
        if not isinstance(data, dict) or data.get("random_covariance") is None:
            return data
        recipe = data["random_covariance"]
        if not isinstance(recipe, RandomCovariance):
            recipe = RandomCovariance.model_validate(recipe)
        n = data.get("N", data.get("n"))
        if not isinstance(n, int) or n < 1:
            return data
        drawn = recipe.draw(n)
        given = data.get("S", data.get("cov"))
        if given is None:
            return {**data, "S": drawn}
        if tuple(tuple(float(x) for x in row) for row in given) != drawn:
            msg = "S does not match the matrix drawn from random_covariance"
            raise ValueError(msg)
        return data

    @model_validator(mode="after")
    def _check_consistency(self) -> "ObservationModel":
        if len(self.m0) != self.n or len(self.m1) != self.n:
            msg = f"m0 and m1 must have length N={self.n}"
            raise ValueError(msg)
        if len(self.cov) != self.n or any(len(row) != self.n for row in self.cov):
            msg = f"S must be {self.n}x{self.n}"
            raise ValueError(msg)
        if self.m0 == self.m1:
            msg = "m1 must differ from m0"
            raise ValueError(msg)
        check_spd(self.cov, name="S")
        return self

    @classmethod
    def from_arrays(
        cls, m0: FloatArray, m1: FloatArray, cov: FloatArray, prior_h0: float = 0.5
    ) -> "ObservationModel":
        m0 = np.atleast_1d(np.asarray(m0, dtype=np.float64))
        return cls(
            N=m0.size,
            m0=tuple(float(x) for x in m0),
            m1=tuple(float(x) for x in np.atleast_1d(m1)),
            S=tuple(tuple(float(x) for x in row) for row in np.atleast_2d(cov)),
            prior_h0=prior_h0,
        )

    @property
    def mean0(self) -> FloatArray:
        return np.asarray(self.m0, dtype=np.float64)

    @property
    def mean1(self) -> FloatArray:
        return np.asarray(self.m1, dtype=np.float64)

    @property
    def covariance(self) -> FloatArray:
        return np.asarray(self.cov, dtype=np.float64)

    @property
    def delta(self) -> FloatArray:
        return self.mean1 - self.mean0

    def is_diagonal(self, rtol: float = 1e-12) -> bool:
        s = self.covariance
        off = s - np.diag(np.diag(s))
        return bool(np.max(np.abs(off), initial=0.0) <= rtol * np.linalg.norm(s, 2))


class Edge(BaseModel):
    model_config = ConfigDict(frozen=True)

    i: int = Field(ge=1)
    j: int = Field(ge=1)
    q: float = Field(gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _ordered(self) -> "Edge":
        if self.i >= self.j:
            msg = f"edge endpoints must satisfy i < j, got ({self.i}, {self.j})"
            raise ValueError(msg)
        return self


class Supergraph(BaseModel):
    """Every link with a positive probability of being online, with that probability."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    n: int = Field(alias="N", ge=1)
    edges: tuple[Edge, ...] = ()
    positions: Optional[tuple[tuple[float, float], ...]] = None

    @model_validator(mode="after")
    def _check_edges(self) -> "Supergraph":
        seen: set[tuple[int, int]] = set()
        for edge in self.edges:
            if edge.j > self.n:
                msg = f"edge ({edge.i}, {edge.j}) has an endpoint outside [1, {self.n}]"
                raise ValueError(msg)
            if (edge.i, edge.j) in seen:
                msg = f"duplicate edge ({edge.i}, {edge.j})"
                raise ValueError(msg)
            seen.add((edge.i, edge.j))
        if self.positions is not None and len(self.positions) != self.n:
            msg = f"positions must list {self.n} points"
            raise ValueError(msg)
        return self

    @property
    def m(self) -> int:
        return len(self.edges)

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Zero-based endpoint index arrays, one entry per edge."""
        ei = np.array([e.i - 1 for e in self.edges], dtype=np.intp)
        ej = np.array([e.j - 1 for e in self.edges], dtype=np.intp)
        return ei, ej

    def probabilities(self) -> FloatArray:
        return np.array([e.q for e in self.edges], dtype=np.float64)

    def incident_edges(self, node: int) -> list[Edge]:
        return [e for e in self.edges if node in (e.i, e.j)]

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(1, self.n + 1))
        graph.add_edges_from((e.i, e.j, {"q": e.q}) for e in self.edges)
        return graph

    def with_uniform_q(self, q: float) -> "Supergraph":
        edges = tuple(Edge(i=e.i, j=e.j, q=q) for e in self.edges)
        return self.model_copy(update={"edges": edges})

    def with_edge_q(self, a: int, b: int, q: float) -> "Supergraph":
        lo, hi = min(a, b), max(a, b)
        if not any(e.i == lo and e.j == hi for e in self.edges):
            msg = f"edge ({lo}, {hi}) is not in the supergraph"
            raise ValueError(msg)
        edges = tuple(Edge(i=e.i, j=e.j, q=q) if (e.i, e.j) == (lo, hi) else e for e in self.edges)
        return self.model_copy(update={"edges": edges})


class SwitchingFusion(BaseModel):
    """W(k) = J with probability p, otherwise I."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    kind: Literal["switching_fusion"] = "switching_fusion"
    n: int = Field(alias="N", ge=1)
    p: float = Field(ge=0.0, le=1.0)

    @property
    def size(self) -> int:
        return self.n


class LinkFailureMetropolis(BaseModel):
    """Independent link failures over a supergraph, Metropolis weights on the online links."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["link_failure_metropolis"] = "link_failure_metropolis"
    graph: Supergraph

    @property
    def size(self) -> int:
        return self.graph.n


WeightModel = Annotated[Union[SwitchingFusion, LinkFailureMetropolis], Field(discriminator="kind")]


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: ObservationModel
    weights: WeightModel
    paths_per_hypothesis: int = Field(default=20000, ge=100)
    k_max: int = Field(ge=1)
    checkpoints: Optional[tuple[int, ...]] = None
    master_seed: int = Field(default=0, ge=0, le=UINT64_MAX)
    stream_offset: int = Field(default=0, ge=0)
    record_sensors: Union[Literal["all"], tuple[int, ...]] = "all"
    estimate_both_hypotheses: bool = False
    chunk_size: int = Field(default=500, ge=1)
    memory_budget_mb: float = Field(default=1024.0, gt=0.0)
    fit_window: Optional[tuple[int, int]] = None
    rate_tolerance: float = Field(default=0.2, gt=0.0)
    r_samples: int = Field(default=10_000, ge=1)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        if self.weights.size != self.model.n:
            msg = f"weight model has {self.weights.size} nodes but the observation model has N={self.model.n}"
            raise ValueError(msg)
        if self.checkpoints is not None:
            ks = list(self.checkpoints)
            if not ks or ks != sorted(set(ks)) or ks[0] < 1 or ks[-1] > self.k_max:
                msg = f"checkpoints must be strictly increasing and within [1, {self.k_max}]"
                raise ValueError(msg)
        if self.record_sensors != "all" and any(not 1 <= s <= self.model.n for s in self.record_sensors):
            msg = f"record_sensors must lie in [1, {self.model.n}]"
            raise ValueError(msg)
        if self.fit_window is not None and not 1 <= self.fit_window[0] < self.fit_window[1]:
            msg = "fit_window must satisfy 1 <= k_lo < k_hi"
            raise ValueError(msg)
        return self

    def checkpoint_list(self) -> list[int]:
        return list(self.checkpoints) if self.checkpoints is not None else list(range(1, self.k_max + 1))

    def sensors(self) -> list[int]:
        return list(range(1, self.model.n + 1)) if self.record_sensors == "all" else list(self.record_sensors)

    def seed(self) -> RngSeed:
        return RngSeed(master_seed=self.master_seed, stream_index=self.stream_offset)

    def config_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json(by_alias=True).encode()).hexdigest()


class ErrorPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: int = Field(ge=1)
    p_hat: float = Field(ge=0.0, le=1.0)
    ci_low: float
    ci_high: float
    n_errors: Optional[int] = Field(default=None, ge=0)
    n_paths: Optional[int] = Field(default=None, ge=1)
    n_errors_h1: Optional[int] = Field(default=None, ge=0)
    n_paths_h1: Optional[int] = Field(default=None, ge=1)

    @property
    def counted(self) -> bool:
        return self.n_errors is not None and self.n_paths is not None

    @property
    def total_errors(self) -> Optional[int]:
        if self.n_errors is None:
            return None
        return self.n_errors + (self.n_errors_h1 or 0)

    @property
    def total_paths(self) -> Optional[int]:
        if self.n_paths is None:
            return None
        return self.n_paths + (self.n_paths_h1 or 0)


class ErrorCurve(BaseModel):
    """Per-sensor error probabilities over a grid of k; sensor 0 is the network average.

    Counted points satisfy p_hat = n_errors / n_paths for the H0-only estimator
    and p_hat = prior_h0 * n_errors / n_paths + (1 - prior_h0) * n_errors_h1 /
    n_paths_h1 for the two-hypothesis estimator.
    """

    model_config = ConfigDict(frozen=True)

    sensor: int = Field(ge=0)
    points: tuple[ErrorPoint, ...]
    estimator: Estimator = "h0_symmetry"
    prior_h0: Optional[float] = Field(default=None, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_points(self) -> "ErrorCurve":
        if self.estimator == "two_hypothesis" and self.prior_h0 is None:
            msg = "a two-hypothesis curve needs prior_h0"
            raise ValueError(msg)
        for pt in self.points:
            slack = 1e-12 * max(pt.p_hat, 1e-300)
            if not pt.ci_low - slack <= pt.p_hat <= pt.ci_high + slack:
                msg = f"confidence interval at k={pt.k} does not contain p_hat"
                raise ValueError(msg)
            if not pt.counted:
                continue
            if self.estimator == "exact":
                msg = f"an exact curve carries no error counts (k={pt.k})"
                raise ValueError(msg)
            if not math.isclose(pt.p_hat, self._count_estimate(pt), rel_tol=1e-12, abs_tol=1e-300):
                msg = f"p_hat at k={pt.k} does not match its error counts"
                raise ValueError(msg)
        return self

    def _count_estimate(self, pt: ErrorPoint) -> float:
        n_errors, n_paths = pt.n_errors or 0, pt.n_paths or 1
        if self.estimator == "h0_symmetry":
            if pt.n_errors_h1 is not None or pt.n_paths_h1 is not None:
                msg = f"H1 counts at k={pt.k} on an H0-only curve"
                raise ValueError(msg)
            return n_errors / n_paths
        if pt.n_errors_h1 is None or pt.n_paths_h1 is None:
            msg = f"two-hypothesis point at k={pt.k} lacks H1 counts"
            raise ValueError(msg)
        pi0 = self.prior_h0 or 0.5
        return pi0 * n_errors / n_paths + (1.0 - pi0) * pt.n_errors_h1 / pt.n_paths_h1

    def ks(self) -> np.ndarray:
        return np.array([pt.k for pt in self.points], dtype=np.int64)

    def p_hats(self) -> FloatArray:
        return np.array([pt.p_hat for pt in self.points], dtype=np.float64)

    def at(self, k: int) -> ErrorPoint:
        for pt in self.points:
            if pt.k == k:
                return pt
        msg = f"curve for sensor {self.sensor} has no checkpoint k={k}"
        raise KeyError(msg)


class RateFit(BaseModel):
    model_config = ConfigDict(frozen=True)

    sensor: int
    fitted_rate: float
    window: tuple[int, int]
    stderr: float
    method: FitMethod = "regression_slope"
    n_points: int
    source: FitSource = "monte_carlo"


class RateReport(BaseModel):
    """Theoretical decay rate (switching fusion) or lower bound (generic weights)."""

    model_config = ConfigDict(frozen=True)

    theoretical_rate_or_bound: float
    regime: Regime
    sufficient_condition_met: bool
    necessary_condition_met: Optional[bool] = None
    empirical_rate: Optional[float] = None
    exact: bool = False
    c_tot: float = Field(gt=0.0)
    r: Optional[float] = None
    r_stderr: Optional[float] = None
    log_r_threshold: Optional[float] = None
    bound_interval: Optional[tuple[float, float]] = None
    sensor_chernoff: dict[int, float] = Field(default_factory=dict)
    sensor_connectivity: dict[int, float] = Field(default_factory=dict)
    sensor_necessary: dict[int, bool] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_ceiling(self) -> "RateReport":
        if self.theoretical_rate_or_bound > self.c_tot * (1.0 + 1e-9):
            msg = "a theoretical rate cannot exceed the total Chernoff information"
            raise ValueError(msg)
        return self


class SensorComparison(BaseModel):
    model_config = ConfigDict(frozen=True)

    sensor: int
    empirical_rate: Optional[float]
    stderr: Optional[float]
    fit_source: Optional[FitSource]
    theory_rate: float
    regime: Regime
    sufficient_met: bool
    necessary_met: Optional[bool]
    centralized_rate: float
    no_cooperation_rate: Optional[float]
    isolated_ceiling: Optional[float]
    censored: bool
    passed: Optional[bool]


class ComparisonReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    theory: RateReport
    sensors: tuple[SensorComparison, ...] = ()


class SwitchingFusionTheory(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    n: int = Field(alias="N", ge=2)
    c_tot: float = Field(alias="C_tot", gt=0.0)


class Theorem2Config(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    n: int = Field(alias="N", ge=1)
    sigma_l2: float = Field(alias="sigma_L2", gt=0.0)
    m_l0: float = Field(alias="m_L0", lt=0.0)
    s_eta_norm: float = Field(alias="S_eta_norm", gt=0.0)
    m_bar: float = Field(ge=0.0)


class TheoryConfig(BaseModel):
    """Input of a theory sweep: exactly one of the three sources must be given."""

    model_config = ConfigDict(frozen=True)

    switching_fusion: Optional[SwitchingFusionTheory] = None
    model: Optional[ObservationModel] = None
    weights: Optional[WeightModel] = None
    theorem2: Optional[Theorem2Config] = None
    r_samples: int = Field(default=10_000, ge=1)
    master_seed: int = Field(default=0, ge=0, le=UINT64_MAX)

    @model_validator(mode="after")
    def _one_source(self) -> "TheoryConfig":
        if self.model is not None and self.weights is None:
            msg = "field 'weights' is required when 'model' is given"
            raise ValueError(msg)
        if self.weights is not None and self.model is None:
            msg = "field 'model' is required when 'weights' is given"
            raise ValueError(msg)
        sources = [self.switching_fusion is not None, self.model is not None, self.theorem2 is not None]
        if sum(sources) != 1:
            msg = "exactly one of 'switching_fusion', 'model'+'weights' or 'theorem2' is required"
            raise ValueError(msg)
        return self

    def config_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json(by_alias=True).encode()).hexdigest()


class RunManifest(BaseModel):
    command: str
    config_hash: str
    master_seed: int
    stream_offset: int = 0
    workers: int = 1
    wall_time_s: float
    version: str
    source_revision: Optional[str] = None
    source_dirty: Optional[bool] = None
    outputs: tuple[str, ...] = ()
