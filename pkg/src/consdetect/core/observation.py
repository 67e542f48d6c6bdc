"""Gaussian two-hypothesis observation model and the statistics derived from it."""

from dataclasses import dataclass
from logging import getLogger
from typing import Optional

import numpy as np
from scipy import linalg

from consdetect.core.errors import DomainError, NumericError, UnsupportedModelError
from consdetect.core.gaussian import FloatArray
from consdetect.core.models import ObservationModel

logger = getLogger(__name__)

MAX_CONDITION_NUMBER = 1e12


@dataclass(frozen=True)
class DerivedStats:
    """Everything the detectors and the theory need from (m0, m1, S).

    `m_eta0`/`m_eta1` and `s_eta` describe the per-sensor LLR increments
    eta(k) under each hypothesis. `c_i` is only set for diagonal S.
    """

    n: int
    v: FloatArray
    m_l0: float
    m_l1: float
    sigma_l2: float
    m_eta0: FloatArray
    m_eta1: FloatArray
    s_eta: FloatArray
    c_tot: float
    c_i: Optional[FloatArray]
    m_bar: float
    k_ratio: float

    @property
    def s_eta_norm(self) -> float:
        return float(np.linalg.norm(self.s_eta, 2))

    def eta_mean(self, hypothesis: int) -> FloatArray:
        if hypothesis not in (0, 1):
            msg = f"hypothesis must be 0 or 1, got {hypothesis}"
            raise DomainError(msg)
        return self.m_eta1 if hypothesis == 1 else self.m_eta0


def derive_stats(model: ObservationModel) -> DerivedStats:
    s = model.covariance
    cond = np.linalg.cond(s)
    if not np.isfinite(cond) or cond > MAX_CONDITION_NUMBER:
        msg = f"noise covariance is ill-conditioned (condition number {cond:.3e})"
        raise NumericError(msg)
    delta = model.delta
    try:
        v = linalg.solve(s, delta, assume_a="pos")
    except linalg.LinAlgError as err:
        msg = "could not solve S v = m1 - m0"
        raise NumericError(msg) from err

    sigma_l2 = float(delta @ v)
    half = v * delta / 2.0
    s_eta = (v[:, None] * s) * v[None, :]
    s_eta = (s_eta + s_eta.T) / 2.0
    c_i = delta**2 / (8.0 * np.diag(s)) if model.is_diagonal() else None
    m_bar = float(np.max(np.abs(half)))
    s_eta_norm = float(np.linalg.norm(s_eta, 2))
    return DerivedStats(
        n=model.n,
        v=v,
        m_l0=-sigma_l2 / 2.0,
        m_l1=sigma_l2 / 2.0,
        sigma_l2=sigma_l2,
        m_eta0=-half,
        m_eta1=half.copy(),
        s_eta=s_eta,
        c_tot=sigma_l2 / 8.0,
        c_i=c_i,
        m_bar=m_bar,
        k_ratio=8.0 * m_bar / s_eta_norm,
    )


def _sensor_index(model: ObservationModel, i: int) -> int:
    if not 1 <= i <= model.n:
        msg = f"sensor index {i} outside [1, {model.n}]"
        raise DomainError(msg)
    return i - 1


def chernoff_no_cooperation(model: ObservationModel, i: int) -> float:
    """Chernoff information of sensor i deciding on its own observations only."""
    if not model.is_diagonal():
        msg = "per-sensor Chernoff information needs a diagonal noise covariance"
        raise UnsupportedModelError(msg)
    idx = _sensor_index(model, i)
    delta_i = float(model.delta[idx])
    if delta_i == 0.0:
        msg = f"sensor {i} observes the same mean under both hypotheses"
        raise DomainError(msg)
    return delta_i**2 / (8.0 * model.cov[idx][idx])


def llr(model: ObservationModel, y: FloatArray) -> float:
    """Network log-likelihood ratio of one observation vector."""
    mid = (model.mean1 + model.mean0) / 2.0
    return float(model.delta @ linalg.solve(model.covariance, np.asarray(y) - mid, assume_a="pos"))


def sensor_llrs(stats: DerivedStats, model: ObservationModel, y: FloatArray) -> FloatArray:
    """Per-sensor LLR terms v_i (y_i - (m1_i + m0_i) / 2); they sum to `llr`."""
    mid = (model.mean1 + model.mean0) / 2.0
    return stats.v * (np.asarray(y, dtype=np.float64) - mid)


def equivalent_uncorrelated_model(n: int, c_i: float) -> ObservationModel:
    """N equal, independent sensors with m0 = 0, m1 = 1 and Chernoff information c_i each."""
    if n < 1 or not c_i > 0:
        msg = f"need n >= 1 and c_i > 0, got n={n}, c_i={c_i}"
        raise DomainError(msg)
    return ObservationModel.from_arrays(np.zeros(n), np.ones(n), np.eye(n) / (8.0 * c_i))
