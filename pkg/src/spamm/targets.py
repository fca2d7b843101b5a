"""Target densities, rejection sampling, and Monte Carlo error metrics.

Ground-truth functions live here: a sum of three B-spline products on
[0,1]^9 and the Friedman-1 function on [0,1]^10, both normalized to unit
L1 mass so they can act as probability densities.  Samples are drawn by
plain rejection from uniform proposals against a sup bound M.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import BoundTooLooseError, InvalidParameterError, UndefinedStatisticError
from .model import SparseMixture, WeightedSampleBatch, mixture_log_pdf

__all__ = [
    "TargetDensity",
    "bspline_value",
    "friedman1_f2",
    "friedman1_target",
    "mc_relative_error",
    "mixture_target",
    "normalize_target",
    "rejection_sample",
    "spline_f1",
    "spline_f1_target",
]

REJECTION_CHUNK = 65536
REJECTION_MAX_PROPOSALS = 10_000_000
REJECTION_MIN_RATE = 1e-6

PROBE_POINTS = 1_000_000
PROBE_SAFETY = 1.2
PROBE_SEED = 20_200_521

_GL_NODES_PER_INTERVAL = 32


@dataclass(frozen=True)
class TargetDensity:
    """A nonnegative density on [0,1)^d with an optional sup bound M.

    M must dominate the supremum of the evaluator; rejection sampling
    requires it, Monte Carlo error evaluation does not.
    """

    d: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    M: Optional[float] = None

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.evaluator(np.atleast_2d(np.asarray(points, dtype=float)))


def rejection_sample(target: TargetDensity, n: int, rng_seed) -> WeightedSampleBatch:
    """Draw n samples from the target by uniform-proposal rejection.

    Proposals x ~ U[0,1]^d are accepted when z < f(x) / M for z ~ U[0,1].
    Raises if the acceptance rate stays below 1e-6 after 10^7 proposals.
    """
    if target.M is None or target.M <= 0:
        raise InvalidParameterError("rejection sampling needs a positive sup bound M")
    rng = np.random.default_rng(rng_seed)
    accepted = []
    have = 0
    proposed = 0
    while have < n:
        x = rng.uniform(0.0, 1.0, size=(REJECTION_CHUNK, target.d))
        z = rng.uniform(0.0, 1.0, size=REJECTION_CHUNK)
        keep = z < target(x) / target.M
        accepted.append(x[keep])
        have += int(keep.sum())
        proposed += REJECTION_CHUNK
        if proposed >= REJECTION_MAX_PROPOSALS and have < REJECTION_MIN_RATE * proposed:
            raise BoundTooLooseError(
                f"accepted {have} of {proposed} proposals; the bound M = {target.M} is too loose"
            )
    return WeightedSampleBatch.with_unit_weights(np.concatenate(accepted, axis=0)[:n])


# ---------------------------------------------------------------------------
# B-splines and the two ground-truth functions
# ---------------------------------------------------------------------------


def bspline_value(x: np.ndarray, order: int, normalized: bool = True) -> np.ndarray:
    """Cardinal B-spline of the given order rescaled to support [0, 1].

    Cox-de Boor recursion on the uniform knots j/order, j = 0..order;
    by default scaled to unit L2 norm on [0, 1].
    """
    if order < 1:
        raise InvalidParameterError("spline order must be at least 1")
    x = np.asarray(x, dtype=float)
    knots = np.arange(order + 1) / order
    levels = [
        ((x >= knots[j]) & (x < knots[j + 1])).astype(float) for j in range(order)
    ]
    for r in range(2, order + 1):
        nxt = []
        for j in range(order - r + 1):
            left = (x - knots[j]) / (knots[j + r - 1] - knots[j]) * levels[j]
            right = (knots[j + r] - x) / (knots[j + r] - knots[j + 1]) * levels[j + 1]
            nxt.append(left + right)
        levels = nxt
    value = levels[0]
    if normalized:
        value = value * _bspline_l2_constant(order)
    return value


def _gauss_legendre_knotwise(order: int):
    """Gauss-Legendre nodes per knot interval: exact for the piecewise
    polynomial splines, unlike a single panel across the kinks."""
    from scipy.special import roots_legendre

    base_x, base_w = roots_legendre(_GL_NODES_PER_INTERVAL)
    xs, ws = [], []
    for j in range(order):
        a, b = j / order, (j + 1) / order
        xs.append(0.5 * (b - a) * (base_x + 1.0) + a)
        ws.append(0.5 * (b - a) * base_w)
    return np.concatenate(xs), np.concatenate(ws)


_BSPLINE_L2: dict = {}
_BSPLINE_L1: dict = {}


def _bspline_l2_constant(order: int) -> float:
    if order not in _BSPLINE_L2:
        xs, ws = _gauss_legendre_knotwise(order)
        raw = bspline_value(xs, order, normalized=False)
        _BSPLINE_L2[order] = 1.0 / float(np.sqrt(ws @ (raw * raw)))
    return _BSPLINE_L2[order]


def _bspline_l1_integral(order: int) -> float:
    """Integral over [0,1] of the L2-normalized spline."""
    if order not in _BSPLINE_L1:
        xs, ws = _gauss_legendre_knotwise(order)
        _BSPLINE_L1[order] = float(ws @ bspline_value(xs, order))
    return _BSPLINE_L1[order]


def spline_f1(points: np.ndarray) -> np.ndarray:
    """Sum of three products of L2-normalized B-splines on [0,1]^9.

    The factors have orders 2, 4, 6; the active triples are (1,3,8),
    (2,5,6) and (4,7,9) in 1-based coordinates.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != 9:
        raise InvalidParameterError(f"spline_f1 expects 9 coordinates, got {points.shape[1]}")
    term1 = bspline_value(points[:, 0], 2) * bspline_value(points[:, 2], 4) * bspline_value(points[:, 7], 6)
    term2 = bspline_value(points[:, 1], 2) * bspline_value(points[:, 4], 4) * bspline_value(points[:, 5], 6)
    term3 = bspline_value(points[:, 3], 2) * bspline_value(points[:, 6], 4) * bspline_value(points[:, 8], 6)
    return term1 + term2 + term3


def friedman1_f2(points: np.ndarray) -> np.ndarray:
    """Friedman-1: 10 sin(pi x1 x2) + 20 (x3 + 0.5)^2 + 10 x4 + 5 x5.

    Only the first five of the ten coordinates are active; the minimum on
    the unit cube is 5, so the function is strictly positive.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != 10:
        raise InvalidParameterError(f"friedman1_f2 expects 10 coordinates, got {points.shape[1]}")
    return (
        10.0 * np.sin(np.pi * points[:, 0] * points[:, 1])
        + 20.0 * (points[:, 2] + 0.5) ** 2
        + 10.0 * points[:, 3]
        + 5.0 * points[:, 4]
    )


def _probe_max(evaluator, d: int, n_probe: int = PROBE_POINTS) -> float:
    rng = np.random.default_rng(PROBE_SEED)
    best = 0.0
    chunk = 100_000
    remaining = n_probe
    while remaining > 0:
        take = min(chunk, remaining)
        best = max(best, float(np.max(evaluator(rng.uniform(0, 1, size=(take, d))))))
        remaining -= take
    return best


def normalize_target(f_raw, d: int, n_mc: int = PROBE_POINTS, rng_seed=PROBE_SEED) -> TargetDensity:
    """Divide by a Monte Carlo L1-norm estimate and bound the sup by a probe.

    Use the dedicated builders for the two ground-truth functions; their
    structure allows an exact tensor-quadrature normalization for the
    spline sum.
    """
    rng = np.random.default_rng(rng_seed)
    total = 0.0
    count = 0
    chunk = 100_000
    while count < n_mc:
        take = min(chunk, n_mc - count)
        values = np.asarray(f_raw(rng.uniform(0, 1, size=(take, d))))
        if np.any(values < 0):
            raise InvalidParameterError("target functions must be nonnegative")
        total += float(values.sum())
        count += take
    l1 = total / count
    if l1 <= 0:
        raise UndefinedStatisticError("the L1 norm estimate is zero")

    def evaluator(points, _f=f_raw, _l1=l1):
        return np.asarray(_f(points)) / _l1

    return TargetDensity(d=d, evaluator=evaluator, M=PROBE_SAFETY * _probe_max(evaluator, d))


def spline_f1_target() -> TargetDensity:
    """spline_f1 normalized exactly through its sum-of-products structure."""
    l1 = 3.0 * _bspline_l1_integral(2) * _bspline_l1_integral(4) * _bspline_l1_integral(6)

    def evaluator(points, _l1=l1):
        return spline_f1(points) / _l1

    return TargetDensity(d=9, evaluator=evaluator, M=PROBE_SAFETY * _probe_max(evaluator, 9))


def friedman1_target() -> TargetDensity:
    """Friedman-1 normalized by a fixed-seed Monte Carlo L1 estimate."""
    return normalize_target(friedman1_f2, d=10, n_mc=PROBE_POINTS, rng_seed=PROBE_SEED)


def mixture_target(model: SparseMixture) -> TargetDensity:
    """A mixture density viewed as a ground-truth target."""

    def evaluator(points, _model=model):
        return np.exp(mixture_log_pdf(_model, points))

    return TargetDensity(d=model.d, evaluator=evaluator, M=None)


def mc_relative_error(
    f: TargetDensity, p_hat: SparseMixture, q: int, n_mc: int, rng_seed
) -> float:
    """Monte Carlo relative L_q error ||f - p_hat||_q / ||f||_q, q in {1, 2}.

    Norms are estimated from uniform draws on the cube.  The q = 2 path
    averages plain squared differences, the q = 1 path takes absolute
    values.
    """
    if q not in (1, 2):
        raise InvalidParameterError("q must be 1 or 2")
    if f.d != p_hat.d:
        raise InvalidParameterError(f"dimension mismatch: target {f.d}, model {p_hat.d}")
    rng = np.random.default_rng(rng_seed)
    num = 0.0
    den = 0.0
    count = 0
    chunk = 100_000
    while count < n_mc:
        take = min(chunk, n_mc - count)
        s = rng.uniform(0, 1, size=(take, f.d))
        fv = np.asarray(f(s))
        pv = np.exp(mixture_log_pdf(p_hat, s))
        diff = fv - pv
        if q == 1:
            num += float(np.abs(diff).sum())
            den += float(np.abs(fv).sum())
        else:
            num += float((diff * diff).sum())
            den += float((fv * fv).sum())
        count += take
    if den <= 0.0:
        raise UndefinedStatisticError("the norm of the target evaluated to zero")
    return float((num / den) ** (1.0 / q))
