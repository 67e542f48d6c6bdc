"""Closed-form error exponents for running consensus.

Switching fusion (W = J with probability p, otherwise I) has an exact
total-probability expression for the error probability and an exact decay
rate. Generic i.i.d. weight models only have a lower bound driven by
r = lambda_2(E[W^2]). Isolated sensors get a necessary condition for
reaching the centralized rate.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from consdetect.core.errors import DomainError
from consdetect.core.gaussian import log_q_function
from consdetect.core.models import Regime, Theorem2Config
from consdetect.core.observation import DerivedStats


@dataclass(frozen=True)
class SwitchingFusionSpec:
    """N equal sensors with Chernoff information c_i each, fused with probability p."""

    n: int
    c_i: float
    p: float

    def __post_init__(self) -> None:
        if self.n < 1:
            msg = f"N must be >= 1, got {self.n}"
            raise DomainError(msg)
        if not (math.isfinite(self.c_i) and self.c_i > 0):
            msg = f"c_i must be positive, got {self.c_i}"
            raise DomainError(msg)
        if not 0.0 <= self.p <= 1.0:
            msg = f"p must lie in [0, 1], got {self.p}"
            raise DomainError(msg)

    @classmethod
    def from_total(cls, n: int, c_tot: float, p: float) -> "SwitchingFusionSpec":
        return cls(n=n, c_i=c_tot / n, p=p)

    @property
    def c_tot(self) -> float:
        return self.n * self.c_i

    @property
    def abs_log_fail(self) -> float:
        """|log(1 - p)|; infinite when p = 1."""
        return math.inf if self.p >= 1.0 else -math.log1p(-self.p)

    def with_p(self, p: float) -> "SwitchingFusionSpec":
        return SwitchingFusionSpec(n=self.n, c_i=self.c_i, p=p)


def _check_k(k: int) -> None:
    if k < 1:
        msg = f"k must be >= 1, got {k}"
        raise DomainError(msg)


def chi(spec: SwitchingFusionSpec, l: int, k: int) -> float:  # noqa: E741
    """Normalized distance of the mean from the threshold when l samples were last fused.

    l = k is accepted as the full-fusion limit.
    """
    _check_k(k)
    if not 0 <= l <= k:
        msg = f"l must lie in [0, {k}], got {l}"
        raise DomainError(msg)
    return math.sqrt(2.0 * spec.c_i) * k / math.sqrt(l / spec.n + (k - l))


def exact_switching_fusion_alpha(spec: SwitchingFusionSpec, k: int) -> float:
    """log P(x_i(k) > 0 | H0) for switching fusion, evaluated in the log domain.

    Conditions on the last fusion instant: with probability p(1-p)^(k-l-1) the
    last fusion happened after l observations, and with probability
    (1-p)^(k-1) there was none. p = 0 and p = 1 are handled as limits.
    """
    _check_k(k)
    ls = np.arange(k)
    chis = math.sqrt(2.0 * spec.c_i) * k / np.sqrt(ls / spec.n + (k - ls))
    log_q = np.asarray(log_q_function(chis))
    log_p = math.log(spec.p) if spec.p > 0 else -math.inf
    log_w = np.empty(k)
    log_w[0] = special.xlog1py(k - 1, -spec.p)
    if k > 1:
        log_w[1:] = log_p + special.xlog1py(k - ls[1:] - 1, -spec.p)
    return float(special.logsumexp(log_q + log_w))


def phi_mode(spec: SwitchingFusionSpec, j: float, k: int) -> float:
    """Decay exponent contributed by the event that the last fusion covered j + 1 samples."""
    _check_k(k)
    if not 0 <= j <= k - 1:
        msg = f"j must lie in [0, {k - 1}], got {j}"
        raise DomainError(msg)
    base = spec.c_tot / (1.0 + (spec.n - 1) * (j + 1) / k)
    if j == 0:
        return base
    return base + (j / k) * spec.abs_log_fail


def phi_star_k(spec: SwitchingFusionSpec, k: int) -> float:
    """Minimum of phi_mode over real j in [0, k-1]."""
    _check_k(k)
    c, n, big_l = spec.c_tot, spec.n, spec.abs_log_fail
    if n == 1:
        return c
    first = 1.0 + (n - 1) / k
    if big_l >= c * (n - 1) / first**2:
        return c / first
    if big_l <= c * (n - 1) / n**2:
        return c / n + ((k - 1) / k) * big_l
    return 2.0 * math.sqrt(big_l * c / (n - 1)) - big_l / (n - 1) - big_l / k


def phi_star(spec: SwitchingFusionSpec) -> tuple[float, Regime]:
    """Exact decay rate of the switching-fusion error probability and its regime."""
    c, n, big_l = spec.c_tot, spec.n, spec.abs_log_fail
    if n == 1 or big_l >= c * (n - 1):
        return c, "optimal"
    if big_l <= c * (n - 1) / n**2:
        return c / n + big_l, "individual_branch"
    return 2.0 * math.sqrt(big_l * c / (n - 1)) - big_l / (n - 1), "suboptimal_branch"


def theorem1_optimality_threshold(spec: SwitchingFusionSpec) -> float:
    """p*: switching fusion reaches the centralized rate iff p >= p*."""
    return float(-math.expm1(-spec.c_tot * (spec.n - 1)))


def theorem1_log_r_threshold(spec: SwitchingFusionSpec) -> float:
    """Same condition stated for |log r|, since r = 1 - p."""
    return spec.c_tot * (spec.n - 1)


@dataclass(frozen=True)
class Theorem2Inputs:
    n: int
    sigma_l2: float
    m_l0: float
    s_eta_norm: float
    m_bar: float
    r: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.r <= 1.0:
            msg = f"r must lie in [0, 1], got {self.r}"
            raise DomainError(msg)
        if not (self.sigma_l2 > 0 and self.s_eta_norm > 0):
            msg = "sigma_L^2 and ||S_eta|| must be positive"
            raise DomainError(msg)

    @classmethod
    def from_stats(cls, stats: DerivedStats, r: float) -> "Theorem2Inputs":
        return cls(
            n=stats.n,
            sigma_l2=stats.sigma_l2,
            m_l0=stats.m_l0,
            s_eta_norm=stats.s_eta_norm,
            m_bar=stats.m_bar,
            r=r,
        )

    @classmethod
    def from_config(cls, cfg: Theorem2Config, r: float) -> "Theorem2Inputs":
        return cls(n=cfg.n, sigma_l2=cfg.sigma_l2, m_l0=cfg.m_l0, s_eta_norm=cfg.s_eta_norm, m_bar=cfg.m_bar, r=r)

    @property
    def k_ratio(self) -> float:
        return 8.0 * self.m_bar / self.s_eta_norm

    @property
    def c_tot(self) -> float:
        return self.sigma_l2 / 8.0

    @property
    def abs_log_r(self) -> float:
        return math.inf if self.r == 0.0 else -math.log(self.r)

    def with_r(self, r: float) -> "Theorem2Inputs":
        return Theorem2Inputs(self.n, self.sigma_l2, self.m_l0, self.s_eta_norm, self.m_bar, r)


def theorem2_log_r_threshold(inp: Theorem2Inputs) -> float:
    """|log r| at or above which the centralized rate is guaranteed."""
    n = inp.n
    return n * n * (1.0 + (1.0 - 1.0 / n) * inp.k_ratio) * inp.s_eta_norm / 8.0


def _mu_bar(inp: Theorem2Inputs, abs_log_r: float) -> float:
    if abs_log_r >= theorem2_log_r_threshold(inp):
        return inp.n / 2.0
    big_k, s = inp.k_ratio, inp.s_eta_norm
    if abs_log_r > s / 8.0:
        root = math.sqrt(big_k**2 + 32.0 * abs_log_r * (1.0 + big_k) / s)
        return (big_k + root) / (4.0 * (big_k + 1.0))
    return math.sqrt(big_k**2 + 32.0 * abs_log_r / s) / 4.0 - big_k / 4.0


def theorem2_mu_bar(inp: Theorem2Inputs) -> float:
    """Largest Chernoff parameter for which the network term is still controlled, capped at N/2."""
    if not 0.0 < inp.r < 1.0:
        msg = f"mu_bar needs r in (0, 1), got {inp.r}"
        raise DomainError(msg)
    return _mu_bar(inp, inp.abs_log_r)


def _rate_bound(inp: Theorem2Inputs, abs_log_r: float) -> tuple[float, bool]:
    if abs_log_r >= theorem2_log_r_threshold(inp):
        return inp.c_tot, True
    mu = _mu_bar(inp, abs_log_r)
    n = inp.n
    return -(inp.m_l0 * mu / n) - inp.sigma_l2 * mu * mu / (2.0 * n * n), False


def theorem2_rate_bound(inp: Theorem2Inputs) -> tuple[float, bool]:
    """Lower bound on the decay rate and whether the centralized rate is guaranteed.

    r = 0 gives (C_tot, True) and r = 1 gives (0, False).
    """
    return _rate_bound(inp, inp.abs_log_r)


def theorem2_bound_interval(inp: Theorem2Inputs, r_stderr: float, z: float = 2.0) -> tuple[float, float]:
    """Bound evaluated at r +/- z standard errors (clipped to [0, 1])."""
    if not math.isfinite(r_stderr) or r_stderr <= 0:
        bound, _ = theorem2_rate_bound(inp)
        return bound, bound
    r_hi = min(1.0, inp.r + z * r_stderr)
    r_lo = max(0.0, inp.r - z * r_stderr)
    low, _ = theorem2_rate_bound(inp.with_r(r_hi))
    high, _ = theorem2_rate_bound(inp.with_r(r_lo))
    return low, high


def theorem2_exponent(inp: Theorem2Inputs, theta: float, mu: float) -> float:
    """Exponent of the Chernoff-type bound for a given mixing weight theta and parameter mu."""
    if not 0.0 <= theta <= 1.0:
        msg = f"theta must lie in [0, 1], got {theta}"
        raise DomainError(msg)
    if not mu > 0:
        msg = f"mu must be positive, got {mu}"
        raise DomainError(msg)
    n = inp.n
    value = inp.sigma_l2 * mu * mu / (2.0 * n * n) + inp.m_l0 * mu / n
    if theta == 0.0:
        return value
    value += 2.0 * abs(2.0 * mu * mu - mu) * inp.m_bar * theta + 0.5 * mu * mu * inp.s_eta_norm * theta
    return value - theta * inp.abs_log_r


def theorem3_necessary(c_tot: float, c_i: float, p_i: float) -> bool:
    """Necessary condition for sensor i to reach C_tot: |log(1 - P_i)| > C_tot - C_i."""
    if not 0 < c_i <= c_tot * (1.0 + 1e-12):
        msg = f"need 0 < C_i <= C_tot, got C_i={c_i}, C_tot={c_tot}"
        raise DomainError(msg)
    if not 0.0 <= p_i <= 1.0:
        msg = f"P_i must lie in [0, 1], got {p_i}"
        raise DomainError(msg)
    if p_i == 1.0 or c_i >= c_tot:
        return True
    return -math.log1p(-p_i) > c_tot - c_i


def isolated_rate_ceiling(c_i: float, p_i: float) -> float:
    """C_i + |log(1 - P_i)|: no sensor connected with probability P_i decays faster."""
    return math.inf if p_i >= 1.0 else c_i - math.log1p(-p_i)


def theorem2_regime(inp: Theorem2Inputs) -> Regime:
    """Which bounding branch produced the Theorem 2 value."""
    a = inp.abs_log_r
    if a >= theorem2_log_r_threshold(inp):
        return "optimal"
    if a > inp.s_eta_norm / 8.0:
        return "suboptimal_branch"
    return "individual_branch"


def equal_sensor_chernoff(stats: DerivedStats, rtol: float = 1e-9) -> Optional[float]:
    """Common per-sensor Chernoff information, or None if sensors differ or S is not diagonal."""
    if stats.c_i is None:
        return None
    c = stats.c_i
    if np.max(c) - np.min(c) > rtol * np.max(c):
        return None
    return float(np.mean(c))
