"""Densities and special functions for circular data on the unit torus.

All coordinates live on T = [0, 1).  Wrapped normal densities are lattice
sums of shifted Gaussian densities truncated to a finite box; von Mises
products use exponentially scaled Bessel evaluations so large concentrations
do not overflow.  Everything here is a pure function of its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import i0e, i1e, logsumexp

from .errors import DegenerateDirectionError, DimensionError, InvalidParameterError

__all__ = [
    "TruncationLevel",
    "arctan_star",
    "bessel_i0_scaled",
    "bessel_i1_scaled",
    "bessel_ratio_A",
    "bessel_ratio_A_prime",
    "bessel_ratio_A_inverse",
    "lattice_offsets",
    "von_mises_logpdf",
    "von_mises_product_pdf",
    "wrapped_normal_log_terms",
    "wrapped_normal_logpdf",
    "wrapped_normal_logpdf_terms",
    "wrapped_normal_pdf",
    "wrapped_normal_1d_logpdf",
]

LOG_2PI = float(np.log(2.0 * np.pi))

# |A(kappa) - r| tolerance for the Newton inversion.
_A_INV_TOL = 1e-10
_A_INV_MAX_NEWTON = 100
_A_INV_BISECT_LO = 1e-12
_A_INV_BISECT_HI = 1e9


@dataclass(frozen=True)
class TruncationLevel:
    """Per-coordinate lattice truncation radius for wrapped normal sums.

    The lattice sum runs over offsets in {-l_max, ..., l_max}^n.  For the
    variances this package works with (sigma^2 well below 0.25) the mass
    neglected at l_max = 3 is below machine precision; the fit loop
    escalates to 5 for broader components.
    """

    l_max: int = 3

    def __post_init__(self):
        if not isinstance(self.l_max, (int, np.integer)) or self.l_max < 0:
            raise InvalidParameterError(f"l_max must be a nonnegative integer, got {self.l_max!r}")


def lattice_offsets(n: int, l_max: int) -> np.ndarray:
    """Integer offsets {-l_max..l_max}^n in lexicographic order, shape (L, n)."""
    if n == 0:
        return np.zeros((1, 0), dtype=np.int64)
    rng = np.arange(-l_max, l_max + 1, dtype=np.int64)
    grids = np.meshgrid(*([rng] * n), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _cholesky_spd(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise InvalidParameterError(f"sigma must be a square matrix, got shape {sigma.shape}")
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise InvalidParameterError("sigma is not symmetric positive definite") from exc


def wrapped_normal_log_terms(
    points: np.ndarray, mu: np.ndarray, sigma: np.ndarray, offsets: np.ndarray
) -> np.ndarray:
    """Log Gaussian densities log N(x + l | mu, sigma) for a set of offsets.

    Parameters
    ----------
    points : (m, n) array of torus points.
    mu : (n,) mean.
    sigma : (n, n) SPD covariance.
    offsets : (L, n) integer lattice offsets.

    Returns
    -------
    (m, L) array with entry [i, j] = log N(points[i] + offsets[j] | mu, sigma).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mu = np.asarray(mu, dtype=float).reshape(-1)
    n = mu.shape[0]
    if points.shape[1] != n:
        raise DimensionError(f"points have dimension {points.shape[1]}, mu has {n}")
    if n == 0:
        return np.zeros((points.shape[0], np.asarray(offsets).shape[0]))
    chol = _cholesky_spd(sigma)
    if chol.shape[0] != n:
        raise DimensionError(f"sigma is {chol.shape[0]}x{chol.shape[0]}, mu has dimension {n}")
    log_norm = -0.5 * n * LOG_2PI - np.sum(np.log(np.diag(chol)))

    # Solve L a = (x - mu)^T and L b = l^T once; the squared Mahalanobis
    # norm of (x - mu + l) expands into ||a||^2 + 2 a.b + ||b||^2.
    from scipy.linalg import solve_triangular

    a = solve_triangular(chol, (points - mu).T, lower=True).T  # (m, n)
    b = solve_triangular(chol, np.asarray(offsets, dtype=float).T, lower=True)  # (n, L)
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + 2.0 * (a @ b)
        + np.sum(b * b, axis=0)[None, :]
    )
    return log_norm - 0.5 * sq


def wrapped_normal_logpdf(
    points: np.ndarray, mu: np.ndarray, sigma: np.ndarray, trunc: TruncationLevel = TruncationLevel()
) -> np.ndarray:
    """Log of the truncated wrapped normal density at each row of `points`."""
    mu = np.asarray(mu, dtype=float).reshape(-1)
    offsets = lattice_offsets(mu.shape[0], trunc.l_max)
    terms = wrapped_normal_log_terms(points, mu, sigma, offsets)
    return logsumexp(terms, axis=1)


def wrapped_normal_pdf(x, mu, sigma, trunc: TruncationLevel = TruncationLevel()) -> float:
    """Truncated wrapped normal density at a single point.

    Sums N(x + l | mu, sigma) over the offset box {-l_max..l_max}^n.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    return float(np.exp(wrapped_normal_logpdf(x, mu, sigma, trunc))[0])


def wrapped_normal_logpdf_terms(x, mu, sigma, trunc: TruncationLevel = TruncationLevel()):
    """All lattice terms of the wrapped normal log density at one point.

    Returns a list of (offset, log N(x + offset | mu, sigma)) pairs; callers
    combine them with log-sum-exp.  Useful wherever individual lattice
    responsibilities are needed without exponent underflow.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    offsets = lattice_offsets(mu.shape[0], trunc.l_max)
    terms = wrapped_normal_log_terms(x, mu, sigma, offsets)[0]
    return [(offsets[j].copy(), float(terms[j])) for j in range(offsets.shape[0])]


def wrapped_normal_1d_logpdf(
    points: np.ndarray, mu: float, sigma2: float, l_max: int = 3
) -> np.ndarray:
    """Vectorized univariate wrapped normal log density (truncated sum)."""
    if sigma2 <= 0:
        raise InvalidParameterError(f"sigma2 must be positive, got {sigma2}")
    points = np.asarray(points, dtype=float)
    m = np.arange(-l_max, l_max + 1, dtype=float)
    z = points[..., None] + m - mu
    terms = -0.5 * z * z / sigma2 - 0.5 * (LOG_2PI + np.log(sigma2))
    return logsumexp(terms, axis=-1)


def von_mises_logpdf(points: np.ndarray, mu: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    """Log density of a product of von Mises factors at each row of `points`.

    Each factor is exp(kappa_j cos(2 pi (x_j - mu_j))) / I0(kappa_j); the
    normalizer is evaluated as log(i0e) + kappa to stay finite for large
    concentrations.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mu = np.asarray(mu, dtype=float).reshape(-1)
    kappa = np.asarray(kappa, dtype=float).reshape(-1)
    if np.any(kappa <= 0):
        raise InvalidParameterError("all kappa entries must be positive")
    if points.shape[1] != mu.shape[0] or mu.shape[0] != kappa.shape[0]:
        raise DimensionError(
            f"inconsistent dimensions: points {points.shape[1]}, mu {mu.shape[0]}, kappa {kappa.shape[0]}"
        )
    log_i0 = np.log(i0e(kappa)) + kappa
    cosines = np.cos(2.0 * np.pi * (points - mu))
    return np.sum(kappa * cosines - log_i0, axis=1)


def von_mises_product_pdf(x, mu, kappa) -> float:
    """Density of a product of von Mises factors at a single point."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return float(np.exp(von_mises_logpdf(x, mu, kappa))[0])


def bessel_i0_scaled(kappa):
    """Exponentially scaled modified Bessel function exp(-|kappa|) I0(kappa)."""
    return i0e(kappa)


def bessel_i1_scaled(kappa):
    """Exponentially scaled modified Bessel function exp(-|kappa|) I1(kappa)."""
    return i1e(kappa)


def bessel_ratio_A(kappa):
    """Mean resultant length A(kappa) = I1(kappa) / I0(kappa), in (0, 1).

    Strictly increasing with A -> 0 for kappa -> 0 and A -> 1 for
    kappa -> infinity.  The scaled Bessel functions keep the ratio finite
    for arbitrarily large kappa.
    """
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa <= 0):
        raise InvalidParameterError("kappa must be positive")
    out = i1e(kappa) / i0e(kappa)
    return float(out) if out.ndim == 0 else out


def bessel_ratio_A_prime(kappa):
    """Derivative A'(kappa) = 1 - A(kappa)/kappa - A(kappa)^2."""
    a = bessel_ratio_A(kappa)
    return 1.0 - a / kappa - a * a


def bessel_ratio_A_inverse(r: float) -> float:
    """Concentration kappa with A(kappa) = r, for r in (0, 1).

    Newton iteration started at r (2 - r^2) / (1 - r^2); falls back to
    bisection on [1e-12, 1e9] if Newton leaves (0, inf) or stalls.
    """
    r = float(r)
    if not 0.0 < r < 1.0:
        raise InvalidParameterError(f"r must lie strictly in (0, 1), got {r}")

    kappa = r * (2.0 - r * r) / (1.0 - r * r)
    for _ in range(_A_INV_MAX_NEWTON):
        a = bessel_ratio_A(kappa)
        err = a - r
        if abs(err) <= _A_INV_TOL:
            return kappa
        deriv = 1.0 - a / kappa - a * a
        if deriv <= 0.0 or not np.isfinite(deriv):
            break
        kappa_next = kappa - err / deriv
        if not (0.0 < kappa_next < np.inf):
            break
        kappa = kappa_next
    return _a_inverse_bisect(r)


def _a_inverse_bisect(r: float) -> float:
    lo, hi = _A_INV_BISECT_LO, _A_INV_BISECT_HI
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if bessel_ratio_A(mid) < r:
            lo = mid
        else:
            hi = mid
        if abs(bessel_ratio_A(mid) - r) <= _A_INV_TOL:
            return mid
    return 0.5 * (lo + hi)


def arctan_star(S: float, C: float) -> float:
    """Quadrant specific inverse tangent of S/C with values in [0, 2 pi).

    Case split: arctan(S/C) for C > 0, S >= 0; pi/2 for C = 0, S > 0;
    arctan(S/C) + pi for C < 0; arctan(S/C) + 2 pi for C > 0, S < 0;
    3 pi / 2 for C = 0, S < 0.  Both arguments zero has no direction.
    """
    S = float(S)
    C = float(C)
    if C > 0.0 and S >= 0.0:
        return float(np.arctan(S / C))
    if C == 0.0 and S > 0.0:
        return float(np.pi / 2.0)
    if C < 0.0:
        return float(np.arctan(S / C) + np.pi)
    if C > 0.0 and S < 0.0:
        return float(np.arctan(S / C) + 2.0 * np.pi)
    if C == 0.0 and S < 0.0:
        return float(3.0 * np.pi / 2.0)
    raise DegenerateDirectionError("arctan_star is undefined for S = C = 0")
