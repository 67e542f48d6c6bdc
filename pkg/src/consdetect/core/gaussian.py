"""Scalar and matrix Gaussian primitives.

Q-function evaluation (direct and in the log domain), the classical Q-function
bracket, multivariate Gaussian sampling, symmetric-positive-definite checks,
second-eigenvalue extraction and the random covariance recipe used by the
simulation studies.
"""

import math
from logging import getLogger
from typing import Optional, Union, overload

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg, special

from consdetect.core.errors import DomainError, NumericError

logger = getLogger(__name__)

UINT64_MAX = 2**64 - 1
SQRT2 = math.sqrt(2.0)
LOG_HALF = math.log(0.5)
SYMMETRY_RTOL = 1e-12
U_REJECTION_THRESHOLD = 1e-12

FloatArray = NDArray[np.float64]
SpdMatrix = FloatArray


class RngSeed(BaseModel):
    """A (master seed, stream index) pair naming one independent random stream.

    Streams come from a Philox4x64 counter-based generator keyed by the pair
    itself, so distinct stream indices never share state and any stream can be
    reconstructed without replaying the others.
    """

    model_config = ConfigDict(frozen=True)

    master_seed: int = Field(ge=0, le=UINT64_MAX)
    stream_index: int = Field(default=0, ge=0, le=UINT64_MAX)

    def generator(self) -> np.random.Generator:
        key = np.array([self.master_seed, self.stream_index], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, offset: int) -> "RngSeed":
        return RngSeed(master_seed=self.master_seed, stream_index=self.stream_index + offset)


def _as_finite(t: ArrayLike, name: str = "t") -> FloatArray:
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        msg = f"{name} must be finite, got {t!r}"
        raise DomainError(msg)
    return arr


def _unwrap(arr: FloatArray) -> Union[float, FloatArray]:
    return float(arr) if arr.ndim == 0 else arr


@overload
def q_function(t: float) -> float: ...
@overload
def q_function(t: FloatArray) -> FloatArray: ...
def q_function(t: Union[float, FloatArray]) -> Union[float, FloatArray]:
    """Right tail probability P(Z > t) of a standard normal Z."""
    arr = _as_finite(t)
    return _unwrap(0.5 * special.erfc(arr / SQRT2))


@overload
def log_q_function(t: float) -> float: ...
@overload
def log_q_function(t: FloatArray) -> FloatArray: ...
def log_q_function(t: Union[float, FloatArray]) -> Union[float, FloatArray]:
    """Natural log of the Q-function, stable far into the right tail.

    For t > 0 the tail is written as Q(t) = 0.5 * erfcx(t/sqrt(2)) * exp(-t^2/2),
    so the logarithm is taken of a quantity of order one and never of an
    underflowed probability.
    """
    arr = _as_finite(t)
    flat = np.atleast_1d(arr)
    out = np.empty_like(flat)
    pos = flat > 0
    u = flat[pos] / SQRT2
    out[pos] = LOG_HALF + np.log(special.erfcx(u)) - u * u
    out[~pos] = np.log(0.5 * special.erfc(flat[~pos] / SQRT2))
    return _unwrap(out.reshape(arr.shape))


def q_bounds(t: float) -> tuple[float, float]:
    """Lower and upper bounds bracketing Q(t) for t > 0."""
    if not math.isfinite(t) or t <= 0:
        msg = f"q_bounds requires a finite t > 0, got {t!r}"
        raise DomainError(msg)
    density = math.exp(-t * t / 2.0) / math.sqrt(2.0 * math.pi)
    return t / (1.0 + t * t) * density, density / t


def is_symmetric(a: FloatArray, rtol: float = SYMMETRY_RTOL) -> bool:
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    return bool(np.max(np.abs(a - a.T), initial=0.0) <= rtol * scale)


def check_spd(cov: ArrayLike, name: str = "covariance") -> SpdMatrix:
    """Validate symmetry and positive definiteness; return the matrix as an array."""
    arr = np.asarray(cov, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        msg = f"{name} must be square, got shape {arr.shape}"
        raise DomainError(msg)
    if not is_symmetric(arr):
        msg = f"{name} is not symmetric"
        raise DomainError(msg)
    try:
        linalg.cholesky(arr, lower=True)
    except linalg.LinAlgError as err:
        msg = f"{name} is not positive definite"
        raise NumericError(msg) from err
    return arr


def psd_factor(cov: ArrayLike) -> FloatArray:
    """Return F with F @ F.T == cov for a symmetric positive semidefinite matrix.

    Eigenvalues within round-off of zero are clipped, so singular covariances
    (for instance when some sensor carries no signal) factor cleanly.
    """
    arr = np.asarray(cov, dtype=np.float64)
    if not is_symmetric(arr, rtol=1e-10):
        msg = "covariance is not symmetric"
        raise DomainError(msg)
    evals, evecs = linalg.eigh(arr)
    floor = -1e-10 * max(1.0, float(np.max(np.abs(evals))))
    if evals.min() < floor:
        msg = f"covariance has a negative eigenvalue {evals.min():.3e}"
        raise NumericError(msg)
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def sample_gaussian(
    mean: ArrayLike, cov: ArrayLike, seed: RngSeed, size: Optional[int] = None
) -> FloatArray:
    """Draw from N(mean, cov) using the Cholesky factor of cov.

    Returns a single N-vector, or a (size, N) array of independent draws.
    """
    mu = np.asarray(mean, dtype=np.float64)
    sigma = np.asarray(cov, dtype=np.float64)
    if sigma.shape != (mu.size, mu.size):
        msg = f"mean has length {mu.size} but covariance has shape {sigma.shape}"
        raise DomainError(msg)
    try:
        chol = linalg.cholesky(sigma, lower=True)
    except linalg.LinAlgError as err:
        msg = "covariance is not positive definite"
        raise NumericError(msg) from err
    gen = seed.generator()
    if size is None:
        return mu + chol @ gen.standard_normal(mu.size)
    return mu + gen.standard_normal((size, mu.size)) @ chol.T


def lambda2(sym: ArrayLike) -> float:
    """Second largest eigenvalue (by algebraic value) of a symmetric matrix."""
    arr = np.asarray(sym, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 2:
        msg = f"lambda2 needs a square matrix of size >= 2, got shape {arr.shape}"
        raise DomainError(msg)
    if not is_symmetric(arr, rtol=1e-10):
        msg = "lambda2 needs a symmetric matrix"
        raise DomainError(msg)
    evals = linalg.eigvalsh(arr)
    return float(evals[-2])


def covariance_from_spectrum(basis: FloatArray, spectrum: FloatArray, alpha_s: float) -> SpdMatrix:
    cov = alpha_s * (basis * spectrum) @ basis.T
    return (cov + cov.T) / 2.0


def generate_random_covariance(n: int, alpha_s: float, seed: RngSeed) -> SpdMatrix:
    """Random covariance with a random orthogonal basis and U[0,1] spectrum.

    Draws M_S with i.i.d. U[0,1] entries, takes the eigenvectors Q_S of
    M_S M_S^T, draws u_S with i.i.d. U[0,1] entries and returns
    alpha_s * Q_S Diag(u_S) Q_S^T. A spectrum containing an entry below 1e-12 is
    redrawn, so the result is always positive definite.
    """
    if n < 1:
        msg = f"n must be >= 1, got {n}"
        raise DomainError(msg)
    if not alpha_s > 0:
        msg = f"alpha_s must be > 0, got {alpha_s}"
        raise DomainError(msg)
    gen = seed.generator()
    m_s = gen.random((n, n))
    _, basis = linalg.eigh(m_s @ m_s.T)
    spectrum = gen.random(n)
    while spectrum.min() < U_REJECTION_THRESHOLD:
        logger.debug("Redrawing covariance spectrum (min entry %.3e)", spectrum.min())
        spectrum = gen.random(n)
    return covariance_from_spectrum(basis, spectrum, alpha_s)
