"""Centralized, running-consensus and no-cooperation detectors."""

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from consdetect.core.errors import DomainError
from consdetect.core.gaussian import FloatArray, RngSeed, log_q_function, psd_factor, q_function
from consdetect.core.models import ObservationModel
from consdetect.core.network import WeightSample
from consdetect.core.observation import DerivedStats, chernoff_no_cooperation


@dataclass(frozen=True)
class ConsensusState:
    k: int
    x: FloatArray


@dataclass(frozen=True)
class DecisionRecord:
    """decisions[i] is 1 when sensor i decides H1, i.e. x_i(k) > 0."""

    k: int
    decisions: np.ndarray


def eta_sample(stats: DerivedStats, hypothesis: int, seed: RngSeed, size: Optional[int] = None) -> FloatArray:
    """Draw LLR increments eta ~ N(m_eta_l, S_eta); S_eta may be singular."""
    mean = stats.eta_mean(hypothesis)
    factor = psd_factor(stats.s_eta)
    gen = seed.generator()
    if size is None:
        return mean + factor @ gen.standard_normal(stats.n)
    return mean + gen.standard_normal((size, stats.n)) @ factor.T


def initial_state(eta_first: FloatArray) -> ConsensusState:
    return ConsensusState(k=1, x=np.array(eta_first, dtype=np.float64))


def _matrix(w: Union[WeightSample, FloatArray]) -> FloatArray:
    return w.w if isinstance(w, WeightSample) else np.asarray(w, dtype=np.float64)


def consensus_step(
    state: ConsensusState, w: Union[WeightSample, FloatArray], eta_next: FloatArray
) -> ConsensusState:
    """x(k+1) = k/(k+1) W(k) x(k) + eta(k+1)/(k+1)."""
    mat = _matrix(w)
    eta_next = np.asarray(eta_next, dtype=np.float64)
    n = state.x.shape[0]
    if mat.shape != (n, n) or eta_next.shape != (n,):
        msg = f"dimension mismatch: state has N={n}, W has shape {mat.shape}, eta has shape {eta_next.shape}"
        raise DomainError(msg)
    k = state.k
    return ConsensusState(k=k + 1, x=(k / (k + 1)) * (mat @ state.x) + eta_next / (k + 1))


def closed_form_state(weights: Sequence[Union[WeightSample, FloatArray]], etas: Sequence[FloatArray]) -> FloatArray:
    """x(k) = (1/k) sum_{j<k} W(k-1)...W(j) eta(j) + eta(k)/k, with k = len(etas)."""
    k = len(etas)
    if k < 2:
        msg = f"closed form needs k >= 2, got {k}"
        raise DomainError(msg)
    if len(weights) != k - 1:
        msg = f"expected {k - 1} weight matrices for k={k}, got {len(weights)}"
        raise DomainError(msg)
    # Horner-style: acc_j = W(j) (acc_{j-1} + eta(j)), so acc_{k-1} = sum_j Phi(k, j) eta(j)
    acc = np.zeros_like(np.asarray(etas[0], dtype=np.float64))
    for w, eta in zip(weights, etas[:-1]):
        acc = _matrix(w) @ (acc + np.asarray(eta, dtype=np.float64))
    return (acc + np.asarray(etas[-1], dtype=np.float64)) / k


def decide(state: ConsensusState) -> DecisionRecord:
    return DecisionRecord(k=state.k, decisions=(state.x > 0).astype(np.int8))


def _check_k(k: int) -> None:
    if k < 1:
        msg = f"k must be >= 1, got {k}"
        raise DomainError(msg)


def centralized_error_probability(stats: DerivedStats, k: int) -> float:
    _check_k(k)
    return float(q_function(math.sqrt(2.0 * k * stats.c_tot)))


def log_centralized_error_probability(stats: DerivedStats, k: int) -> float:
    _check_k(k)
    return float(log_q_function(math.sqrt(2.0 * k * stats.c_tot)))


def no_cooperation_error_probability(model: ObservationModel, i: int, k: int) -> float:
    _check_k(k)
    return float(q_function(math.sqrt(2.0 * k * chernoff_no_cooperation(model, i))))


def log_no_cooperation_error_probability(model: ObservationModel, i: int, k: int) -> float:
    _check_k(k)
    return float(log_q_function(math.sqrt(2.0 * k * chernoff_no_cooperation(model, i))))
