"""Supergraphs, random averaging matrices and their spectral summaries."""

import math
from dataclasses import dataclass
from logging import getLogger
from typing import Literal, Optional, Union

import numpy as np
from scipy import stats
from scipy.spatial.distance import pdist

from consdetect.core.errors import DomainError, EdgeCountUnreachableError
from consdetect.core.gaussian import SQRT2, FloatArray, RngSeed, is_symmetric, lambda2
from consdetect.core.models import Edge, LinkFailureMetropolis, Supergraph, SwitchingFusion

logger = getLogger(__name__)

WeightModelT = Union[SwitchingFusion, LinkFailureMetropolis]
JACKKNIFE_GROUPS = 20
BISECTION_MAX_ITER = 200
_BATCH = 1000


@dataclass(frozen=True)
class WeightSample:
    w: FloatArray

    def check(self, atol: float = 1e-12) -> None:
        """Raise DomainError unless w is symmetric, nonnegative and row-stochastic."""
        if not is_symmetric(self.w, rtol=atol):
            msg = "weight matrix is not symmetric"
            raise DomainError(msg)
        if np.min(self.w) < -atol:
            msg = "weight matrix has negative entries"
            raise DomainError(msg)
        if np.max(np.abs(self.w.sum(axis=1) - 1.0)) > atol:
            msg = "weight matrix rows do not sum to one"
            raise DomainError(msg)


def averaging_matrix(n: int) -> FloatArray:
    return np.full((n, n), 1.0 / n)


def _positions(n: int, seed: RngSeed) -> FloatArray:
    return seed.generator().random((n, 2))


def _edges_within(positions: FloatArray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    n = positions.shape[0]
    ii, jj = np.triu_indices(n, k=1)
    close = pdist(positions) < radius
    return ii[close], jj[close]


def geometric_supergraph(n: int, radius: float, uniform_q: float, seed: RngSeed) -> Supergraph:
    """Random geometric graph on the unit square; {i, j} is an edge iff |x_i - x_j| < radius."""
    if n < 2:
        msg = f"a geometric supergraph needs N >= 2, got {n}"
        raise DomainError(msg)
    if radius < 0:
        msg = f"radius must be nonnegative, got {radius}"
        raise DomainError(msg)
    pos = _positions(n, seed)
    ii, jj = _edges_within(pos, radius)
    edges = tuple(Edge(i=int(a) + 1, j=int(b) + 1, q=uniform_q) for a, b in zip(ii, jj))
    graph = Supergraph(N=n, edges=edges, positions=tuple((float(x), float(y)) for x, y in pos))
    logger.debug("Geometric supergraph N=%d radius=%.4f has M=%d edges", n, radius, graph.m)
    return graph


def radius_for_edge_count(n: int, target_m: int, seed: RngSeed) -> tuple[float, int]:
    """Bisect the radius in [0, sqrt(2)] until the graph drawn from `seed` has `target_m` edges."""
    if n < 2:
        msg = f"N must be >= 2, got {n}"
        raise DomainError(msg)
    dist = pdist(_positions(n, seed))
    lo, hi = 0.0, SQRT2
    best_radius, best_m = hi, int(np.sum(dist < hi))
    for _ in range(BISECTION_MAX_ITER):
        mid = (lo + hi) / 2.0
        m = int(np.sum(dist < mid))
        if abs(m - target_m) < abs(best_m - target_m):
            best_radius, best_m = mid, m
        if m == target_m:
            return mid, m
        if m < target_m:
            lo = mid
        else:
            hi = mid
    msg = f"no radius in [0, sqrt(2)] gives M={target_m}; closest is M={best_m} at radius {best_radius:.6f}"
    raise EdgeCountUnreachableError(msg, closest_radius=best_radius, closest_m=best_m)


def pendant_supergraph(
    n: int,
    pendant: int,
    anchor: int,
    q_pendant: float,
    q_rest: float,
    seed: RngSeed,
    radius: float = 0.4,
) -> Supergraph:
    """Geometric supergraph on the other N-1 nodes plus one pendant node hanging off `anchor`."""
    if not (1 <= pendant <= n and 1 <= anchor <= n):
        msg = f"pendant and anchor must lie in [1, {n}], got {pendant} and {anchor}"
        raise DomainError(msg)
    if pendant == anchor:
        msg = "pendant and anchor must be different nodes"
        raise DomainError(msg)
    if not 0 < q_pendant <= 1:
        msg = f"q_pendant must lie in (0, 1], got {q_pendant}"
        raise DomainError(msg)
    others = [node for node in range(1, n + 1) if node != pendant]
    core = geometric_supergraph(n - 1, radius, q_rest, seed)
    edges = [Edge(i=others[e.i - 1], j=others[e.j - 1], q=e.q) for e in core.edges]
    edges.append(Edge(i=min(pendant, anchor), j=max(pendant, anchor), q=q_pendant))
    edges.sort(key=lambda e: (e.i, e.j))
    return Supergraph(N=n, edges=tuple(edges))


def incidence(graph: Supergraph) -> FloatArray:
    """Unsigned node-edge incidence matrix of shape (M, N)."""
    ei, ej = graph.endpoints()
    inc = np.zeros((graph.m, graph.n))
    rows = np.arange(graph.m)
    inc[rows, ei] = 1.0
    inc[rows, ej] = 1.0
    return inc


def metropolis_weights(graph: Supergraph, online: np.ndarray) -> FloatArray:
    """Metropolis matrices for a batch of link realizations.

    `online` is a boolean (batch, M) array; the result has shape (batch, N, N).
    """
    online = np.atleast_2d(online)
    ei, ej = graph.endpoints()
    mask = online.astype(np.float64)
    degrees = mask @ incidence(graph)
    w_edge = mask / (1.0 + np.maximum(degrees[:, ei], degrees[:, ej]))
    batch = online.shape[0]
    w = np.zeros((batch, graph.n, graph.n))
    w[:, ei, ej] = w_edge
    w[:, ej, ei] = w_edge
    diag = np.arange(graph.n)
    w[:, diag, diag] = 1.0 - w.sum(axis=2)
    return w


def sample_weight_batch(model: WeightModelT, gen: np.random.Generator, size: int) -> FloatArray:
    if isinstance(model, SwitchingFusion):
        fused = gen.random(size) < model.p
        out = np.broadcast_to(np.eye(model.n), (size, model.n, model.n)).copy()
        out[fused] = averaging_matrix(model.n)
        return out
    graph = model.graph
    online = gen.random((size, graph.m)) < graph.probabilities()
    return metropolis_weights(graph, online)


def sample_weight(model: WeightModelT, seed: RngSeed) -> WeightSample:
    return WeightSample(w=sample_weight_batch(model, seed.generator(), 1)[0])


class ConsensusKernel:
    """Applies W(k) x for a batch of paths without forming the matrices.

    Each path's realization is a boolean row: one "fused" flag for switching
    fusion, or one "online" flag per supergraph edge for link failures.
    """

    def __init__(self, model: WeightModelT) -> None:
        self.model = model
        if isinstance(model, LinkFailureMetropolis):
            graph = model.graph
            self.ei, self.ej = graph.endpoints()
            self.q = graph.probabilities()
            self.inc = incidence(graph)
            signed = np.zeros((graph.m, graph.n))
            rows = np.arange(graph.m)
            signed[rows, self.ei] = 1.0
            signed[rows, self.ej] = -1.0
            self.signed = signed

    @property
    def draws_per_step(self) -> int:
        if isinstance(self.model, SwitchingFusion):
            return 1
        return self.model.graph.m

    def realize(self, u: FloatArray) -> np.ndarray:
        """Turn U[0,1) draws of shape (..., draws_per_step) into link/fusion flags."""
        if isinstance(self.model, SwitchingFusion):
            return u < self.model.p
        return u < self.q

    def apply(self, x: FloatArray, flags: np.ndarray) -> FloatArray:
        if isinstance(self.model, SwitchingFusion):
            fused = flags[:, 0]
            out = x.copy()
            out[fused] = x[fused].mean(axis=1, keepdims=True)
            return out
        if self.model.graph.m == 0:
            return x.copy()
        mask = flags.astype(np.float64)
        degrees = mask @ self.inc
        w_edge = mask / (1.0 + np.maximum(degrees[:, self.ei], degrees[:, self.ej]))
        diff = x[:, self.ej] - x[:, self.ei]
        return x + (w_edge * diff) @ self.signed


def spectral_r(
    model: WeightModelT,
    n_samples: int = 10_000,
    seed: Optional[RngSeed] = None,
    method: Literal["auto", "sample"] = "auto",
) -> tuple[float, float]:
    """r = lambda_2(E[W^2]) and its standard error.

    Switching fusion is exact (E[W^2] = pJ + (1-p)I) unless `method="sample"`.
    Otherwise E[W^2] is averaged over `n_samples` draws and the standard error
    comes from a grouped delete-one jackknife.
    """
    if n_samples < 1:
        msg = f"n_samples must be >= 1, got {n_samples}"
        raise DomainError(msg)
    if isinstance(model, SwitchingFusion) and method == "auto":
        return 1.0 - model.p, 0.0
    gen = (seed or RngSeed(master_seed=0)).generator()
    groups = min(JACKKNIFE_GROUPS, n_samples)
    n = model.size
    sums = np.zeros((groups, n, n))
    counts = np.zeros(groups)
    for start in range(0, n_samples, _BATCH):
        stop = min(start + _BATCH, n_samples)
        w = sample_weight_batch(model, gen, stop - start)
        w2 = w @ w
        group_of = np.arange(start, stop) * groups // n_samples
        np.add.at(sums, group_of, w2)
        np.add.at(counts, group_of, 1.0)
    total = sums.sum(axis=0)
    r = lambda2(_symmetrize(total / n_samples))
    if groups < 2:
        return r, math.nan
    loo = np.array([lambda2(_symmetrize((total - sums[g]) / (n_samples - counts[g]))) for g in range(groups)])
    stderr = math.sqrt((groups - 1) / groups * float(np.sum((loo - loo.mean()) ** 2)))
    logger.info("Estimated r=%.6f (stderr %.2e) from %d samples", r, stderr, n_samples)
    return r, stderr


def _symmetrize(a: FloatArray) -> FloatArray:
    return (a + a.T) / 2.0


def connectivity_probability(model: WeightModelT, i: int) -> float:
    """P_i: probability that sensor i has at least one online link at a given step.

    For switching fusion this is p, the probability that W(k) = J.
    """
    if not 1 <= i <= model.size:
        msg = f"sensor index {i} outside [1, {model.size}]"
        raise DomainError(msg)
    if isinstance(model, SwitchingFusion):
        return model.p
    incident = model.graph.incident_edges(i)
    if not incident:
        logger.warning("Sensor %d has no incident supergraph edges", i)
        return 0.0
    return 1.0 - float(np.prod([1.0 - e.q for e in incident]))


@dataclass(frozen=True)
class RowSumCheck:
    abs_sums: FloatArray
    sq_sums: FloatArray
    abs_bound: float
    sq_bound: float

    def holds(self, atol: float = 1e-12) -> bool:
        return bool(np.all(self.abs_sums <= self.abs_bound + atol) and np.all(self.sq_sums <= self.sq_bound + atol))


def lemma3_row_sums(w: FloatArray) -> RowSumCheck:
    """Row sums of |W - J| and |W - J|^2 against 2(N-1)/N and (N-1)/N."""
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[0]
    dev = w - averaging_matrix(n)
    return RowSumCheck(
        abs_sums=np.abs(dev).sum(axis=1),
        sq_sums=(dev**2).sum(axis=1),
        abs_bound=2.0 * (n - 1) / n,
        sq_bound=(n - 1) / n,
    )


@dataclass(frozen=True)
class TailFrequencyCheck:
    span: int
    eps: float
    exceedances: int
    trials: int
    bound: float
    allowed: int

    @property
    def frequency(self) -> float:
        return self.exceedances / self.trials

    def holds(self) -> bool:
        return self.exceedances <= self.allowed


def lemma4_tail_frequency(
    model: WeightModelT, span: int, eps: float, trials: int, seed: RngSeed, confidence: float = 0.99
) -> TailFrequencyCheck:
    """Frequency of ||(W(k-1) - J)...(W(j) - J)|| > eps for k - j = span.

    The bound N^4 / eps^2 * r^span is turned into an allowed exceedance count
    with a one-sided binomial quantile at `confidence`.
    """
    if span < 1 or not eps > 0 or trials < 1:
        msg = f"need span >= 1, eps > 0 and trials >= 1, got {span}, {eps}, {trials}"
        raise DomainError(msg)
    n = model.size
    r, _ = spectral_r(model, seed=seed.child(1))
    j = averaging_matrix(n)
    gen = seed.generator()
    exceed = 0
    for start in range(0, trials, _BATCH):
        size = min(_BATCH, trials - start)
        prod = np.broadcast_to(np.eye(n), (size, n, n)).copy()
        for _ in range(span):
            prod = (sample_weight_batch(model, gen, size) - j) @ prod
        exceed += int(np.sum(np.linalg.norm(prod, ord=2, axis=(1, 2)) > eps))
    bound = n**4 / eps**2 * r**span
    allowed = int(stats.binom.ppf(confidence, trials, min(bound, 1.0)))
    return TailFrequencyCheck(span=span, eps=eps, exceedances=exceed, trials=trials, bound=bound, allowed=allowed)
