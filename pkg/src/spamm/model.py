"""Sparse mixture models on T^d and weighted sample batches.

A mixture component acts on a small, strictly increasing index set u of
coordinates through a circular density (wrapped Gaussian, diagonal wrapped
Gaussian, or a product of von Mises factors) and is uniform on all other
coordinates.  A component with u = () is the uniform density on T^d.

Models and batches are immutable after construction; sampling takes an
explicit seed, so everything can be shared freely across threads.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, InvalidParameterError
from .torus import (
    TruncationLevel,
    von_mises_logpdf,
    wrapped_normal_logpdf,
    wrapped_normal_1d_logpdf,
)

logger = logging.getLogger(__name__)

SIGMA_JITTER = 1e-8
SIGMA2_FLOOR = 1e-8

# Components broader than this escalate the lattice truncation from 3 to 5.
VARIANCE_ESCALATION = 0.25


def _as_index_set(u) -> tuple:
    u = tuple(int(i) for i in u)
    if any(i < 0 for i in u):
        raise InvalidParameterError(f"index set entries must be nonnegative, got {u}")
    if any(a >= b for a, b in zip(u, u[1:])):
        raise InvalidParameterError(f"index set must be strictly increasing, got {u}")
    return u


def _frozen_array(values, shape) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(shape)
    arr.flags.writeable = False
    return arr


def _jitter_guard(sigma: np.ndarray) -> np.ndarray:
    """Return sigma if SPD, else retry once with a small diagonal jitter."""
    if sigma.shape[0] == 0:
        return sigma
    try:
        np.linalg.cholesky(sigma)
        return sigma
    except np.linalg.LinAlgError:
        pass
    n = sigma.shape[0]
    jittered = sigma + (SIGMA_JITTER * np.trace(sigma) / n + SIGMA_JITTER) * np.eye(n)
    try:
        np.linalg.cholesky(jittered)
    except np.linalg.LinAlgError as exc:
        raise InvalidParameterError("sigma is not positive definite even after jitter") from exc
    return jittered


@dataclass(frozen=True)
class WrappedComponent:
    """Wrapped Gaussian on the coordinates in u with full covariance."""

    u: tuple
    mu: np.ndarray
    sigma: np.ndarray

    family = "wrapped"

    def __post_init__(self):
        u = _as_index_set(self.u)
        n = len(u)
        mu = _frozen_array(np.mod(np.asarray(self.mu, dtype=float), 1.0), (n,))
        sigma = np.array(self.sigma, dtype=float).reshape((n, n))
        sigma = _jitter_guard(0.5 * (sigma + sigma.T))
        sigma.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def log_pdf(self, points_u: np.ndarray, trunc: TruncationLevel) -> np.ndarray:
        if not self.u:
            return np.zeros(np.atleast_2d(points_u).shape[0])
        return wrapped_normal_logpdf(points_u, self.mu, self.sigma, trunc)

    def sample_u(self, m: int, rng: np.random.Generator) -> np.ndarray:
        if not self.u:
            return np.zeros((m, 0))
        chol = np.linalg.cholesky(self.sigma)
        draws = self.mu + rng.standard_normal((m, len(self.u))) @ chol.T
        return np.mod(draws, 1.0)

    def variances(self) -> np.ndarray:
        return np.diag(self.sigma)


@dataclass(frozen=True)
class DiagWrappedComponent:
    """Product of univariate wrapped Gaussians on the coordinates in u."""

    u: tuple
    mu: np.ndarray
    sigma2: np.ndarray

    family = "diag"

    def __post_init__(self):
        u = _as_index_set(self.u)
        n = len(u)
        mu = _frozen_array(np.mod(np.asarray(self.mu, dtype=float), 1.0), (n,))
        sigma2 = np.array(self.sigma2, dtype=float).reshape((n,))
        if np.any(sigma2 <= 0):
            raise InvalidParameterError(f"sigma2 entries must be positive, got {sigma2}")
        sigma2 = np.maximum(sigma2, SIGMA2_FLOOR)
        sigma2.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)

    def log_pdf(self, points_u: np.ndarray, trunc: TruncationLevel) -> np.ndarray:
        points_u = np.atleast_2d(points_u)
        out = np.zeros(points_u.shape[0])
        for j in range(len(self.u)):
            out += wrapped_normal_1d_logpdf(
                points_u[:, j], self.mu[j], self.sigma2[j], trunc.l_max
            )
        return out

    def sample_u(self, m: int, rng: np.random.Generator) -> np.ndarray:
        if not self.u:
            return np.zeros((m, 0))
        draws = self.mu + rng.standard_normal((m, len(self.u))) * np.sqrt(self.sigma2)
        return np.mod(draws, 1.0)

    def variances(self) -> np.ndarray:
        return self.sigma2


@dataclass(frozen=True)
class VonMisesComponent:
    """Product of von Mises factors on the coordinates in u."""

    u: tuple
    mu: np.ndarray
    kappa: np.ndarray

    family = "vonmises"

    def __post_init__(self):
        u = _as_index_set(self.u)
        n = len(u)
        mu = _frozen_array(np.mod(np.asarray(self.mu, dtype=float), 1.0), (n,))
        kappa = np.array(self.kappa, dtype=float).reshape((n,))
        if np.any(kappa <= 0):
            raise InvalidParameterError(f"kappa entries must be positive, got {kappa}")
        kappa.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "kappa", kappa)

    def log_pdf(self, points_u: np.ndarray, trunc: TruncationLevel) -> np.ndarray:
        if not self.u:
            return np.zeros(np.atleast_2d(points_u).shape[0])
        return von_mises_logpdf(points_u, self.mu, self.kappa)

    def sample_u(self, m: int, rng: np.random.Generator) -> np.ndarray:
        if not self.u:
            return np.zeros((m, 0))
        cols = [
            _sample_von_mises_1d(self.mu[j], self.kappa[j], m, rng)
            for j in range(len(self.u))
        ]
        return np.stack(cols, axis=1)

    def variances(self) -> np.ndarray:
        # Circular variance proxy so truncation escalation has something
        # to look at; von Mises evaluation itself needs no lattice.
        return 1.0 / (4.0 * np.pi**2 * self.kappa)


Component = Union[WrappedComponent, DiagWrappedComponent, VonMisesComponent]


def _sample_von_mises_1d(mu: float, kappa: float, m: int, rng: np.random.Generator) -> np.ndarray:
    """Best-Fisher wrapped Cauchy rejection sampler, mapped to [0, 1)."""
    if kappa < 1e-6:
        return rng.uniform(0.0, 1.0, size=m)
    a = 1.0 + np.sqrt(1.0 + 4.0 * kappa * kappa)
    b = (a - np.sqrt(2.0 * a)) / (2.0 * kappa)
    r = (1.0 + b * b) / (2.0 * b)

    theta = np.empty(m)
    todo = np.arange(m)
    while todo.size:
        u1, u2, u3 = rng.uniform(size=(3, todo.size))
        z = np.cos(np.pi * u1)
        f = (1.0 + r * z) / (r + z)
        c = kappa * (r - f)
        accept = (c * (2.0 - c) - u2 > 0.0) | (np.log(c / u2) + 1.0 - c >= 0.0)
        idx = todo[accept]
        theta[idx] = np.sign(u3[accept] - 0.5) * np.arccos(np.clip(f[accept], -1.0, 1.0))
        todo = todo[~accept]
    return np.mod(mu + theta / (2.0 * np.pi), 1.0)


@dataclass(frozen=True)
class SparseMixture:
    """Convex combination of sparse components over a common ambient T^d."""

    d: int
    alpha: np.ndarray
    components: tuple

    def __post_init__(self):
        components = tuple(self.components)
        if not components:
            raise InvalidParameterError("a mixture needs at least one component")
        families = {c.family for c in components}
        if len(families) != 1:
            raise InvalidParameterError(f"mixed families are not supported: {sorted(families)}")
        d = int(self.d)
        for c in components:
            if c.u and c.u[-1] >= d:
                raise DimensionError(f"component index set {c.u} exceeds ambient dimension {d}")
        alpha = np.array(self.alpha, dtype=float).reshape((len(components),))
        if np.any(alpha < -1e-12):
            raise InvalidParameterError("mixture weights must be nonnegative")
        if abs(alpha.sum() - 1.0) > 1e-9:
            raise InvalidParameterError(f"mixture weights sum to {alpha.sum()}, expected 1")
        alpha = np.maximum(alpha, 0.0)
        alpha.flags.writeable = False
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "components", components)

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def family(self) -> str:
        return self.components[0].family

    def max_variance(self) -> float:
        vs = [c.variances() for c in self.components if c.u]
        if not vs:
            return 0.0
        return float(max(np.max(v) for v in vs))


def uniform_mixture(d: int, family: str) -> SparseMixture:
    """The single-component uniform model, the starting point of selection."""
    makers = {
        "wrapped": lambda: WrappedComponent((), np.zeros(0), np.zeros((0, 0))),
        "diag": lambda: DiagWrappedComponent((), np.zeros(0), np.zeros(0)),
        "vonmises": lambda: VonMisesComponent((), np.zeros(0), np.zeros(0)),
    }
    if family not in makers:
        raise InvalidParameterError(f"unknown family {family!r}")
    return SparseMixture(d, np.array([1.0]), (makers[family](),))


def effective_truncation(model: SparseMixture, base: TruncationLevel | None = None) -> TruncationLevel:
    """Base truncation, escalated to l_max 5 for unusually broad components."""
    base = base if base is not None else TruncationLevel()
    if model.family in ("wrapped", "diag") and model.max_variance() > VARIANCE_ESCALATION:
        return TruncationLevel(max(base.l_max, 5))
    return base


@dataclass(frozen=True)
class WeightedSampleBatch:
    """N points on T^d with nonnegative importance weights summing to N."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.mod(np.array(self.points, dtype=float), 1.0)
        if points.ndim != 2:
            raise DimensionError(f"points must be a 2-d array, got shape {points.shape}")
        n = points.shape[0]
        if n == 0:
            raise InvalidParameterError("batch must contain at least one sample")
        weights = np.array(self.weights, dtype=float).reshape((n,))
        if np.any(weights < 0):
            raise InvalidParameterError("weights must be nonnegative")
        total = weights.sum()
        if total <= 0:
            raise InvalidParameterError("weights must not all be zero")
        if abs(total - n) > 1e-9 * n:  # keep already-normalized weights bit-exact
            weights = weights * (n / total)
        points.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def with_unit_weights(cls, points: np.ndarray) -> "WeightedSampleBatch":
        points = np.asarray(points, dtype=float)
        return cls(points, np.ones(points.shape[0]))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


def component_log_pdf(
    component: Component, points: np.ndarray, trunc: TruncationLevel
) -> np.ndarray:
    """Component log density evaluated on full d-dimensional points."""
    points = np.atleast_2d(points)
    if not component.u:
        return np.zeros(points.shape[0])
    return component.log_pdf(points[:, list(component.u)], trunc)


def mixture_log_pdf(
    model: SparseMixture, points: np.ndarray, trunc: TruncationLevel | None = None
) -> np.ndarray:
    """Log mixture density at each row of `points`, via log-sum-exp."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != model.d:
        raise DimensionError(f"points have dimension {points.shape[1]}, model has {model.d}")
    trunc = effective_truncation(model, trunc)
    logs = np.empty((points.shape[0], model.n_components))
    with np.errstate(divide="ignore"):
        log_alpha = np.log(model.alpha)
    for k, comp in enumerate(model.components):
        if model.alpha[k] == 0.0:
            logs[:, k] = -np.inf
            continue
        logs[:, k] = log_alpha[k] + component_log_pdf(comp, points, trunc)
    return logsumexp(logs, axis=1)


def mixture_pdf(model: SparseMixture, x, trunc: TruncationLevel | None = None) -> float:
    """Mixture density at a single point of T^d."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return float(np.exp(mixture_log_pdf(model, x, trunc))[0])


def neg_log_likelihood(
    model: SparseMixture, batch: WeightedSampleBatch, trunc: TruncationLevel | None = None
) -> float:
    """Weighted negative log likelihood -sum_i w_i log p(x^i).

    A sample with zero density under every component makes the objective
    infinite; its index is reported through the module logger.
    """
    logp = mixture_log_pdf(model, batch.points, trunc)
    bad = np.flatnonzero(np.isneginf(logp))
    if bad.size:
        logger.warning("sample %d has zero density under every component", int(bad[0]))
        return float("inf")
    return float(-np.dot(batch.weights, logp))


def marginalize(component: Component, v) -> Component:
    """Project a component onto the index set v.

    Coordinates outside the component's own index set marginalize to the
    uniform density and are dropped, so the result lives on v intersected
    with u; an empty intersection gives the uniform component.
    """
    v = set(int(i) for i in v)
    keep = [j for j, idx in enumerate(component.u) if idx in v]
    u = tuple(component.u[j] for j in keep)
    if isinstance(component, WrappedComponent):
        return WrappedComponent(u, component.mu[keep], component.sigma[np.ix_(keep, keep)])
    if isinstance(component, DiagWrappedComponent):
        return DiagWrappedComponent(u, component.mu[keep], component.sigma2[keep])
    if isinstance(component, VonMisesComponent):
        return VonMisesComponent(u, component.mu[keep], component.kappa[keep])
    raise TypeError(f"unknown component type {type(component)!r}")


def sample(model: SparseMixture, n: int, rng_seed) -> WeightedSampleBatch:
    """Draw n i.i.d. samples from the mixture with unit weights.

    Component labels are categorical in alpha; coordinates outside the
    chosen component's index set are uniform on [0, 1).
    """
    rng = np.random.default_rng(rng_seed)
    labels = rng.choice(model.n_components, size=n, p=model.alpha)
    points = rng.uniform(0.0, 1.0, size=(n, model.d))
    for k, comp in enumerate(model.components):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0 or not comp.u:
            continue
        points[np.ix_(idx, list(comp.u))] = comp.sample_u(idx.size, rng)
    return WeightedSampleBatch.with_unit_weights(points)


def sample_component(component: Component, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n points on T^{|u|} from a single component's density."""
    return component.sample_u(n, rng)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def model_to_dict(model: SparseMixture) -> dict:
    comps = []
    for c in model.components:
        entry = {"u": list(c.u), "mu": c.mu.tolist()}
        if isinstance(c, WrappedComponent):
            entry["sigma"] = c.sigma.tolist()
        elif isinstance(c, DiagWrappedComponent):
            entry["sigma2"] = c.sigma2.tolist()
        else:
            entry["kappa"] = c.kappa.tolist()
        comps.append(entry)
    return {
        "family": model.family,
        "d": model.d,
        "alpha": model.alpha.tolist(),
        "components": comps,
    }


def model_from_dict(doc: dict) -> SparseMixture:
    family = doc["family"]
    comps = []
    for entry in doc["components"]:
        u = tuple(entry["u"])
        n = len(u)
        mu = np.asarray(entry["mu"], dtype=float)
        if family == "wrapped":
            comps.append(WrappedComponent(u, mu, np.asarray(entry["sigma"]).reshape(n, n)))
        elif family == "diag":
            comps.append(DiagWrappedComponent(u, mu, np.asarray(entry["sigma2"])))
        elif family == "vonmises":
            comps.append(VonMisesComponent(u, mu, np.asarray(entry["kappa"])))
        else:
            raise InvalidParameterError(f"unknown family {family!r}")
    return SparseMixture(doc["d"], np.asarray(doc["alpha"], dtype=float), tuple(comps))


def save_model(model: SparseMixture, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2)
        fh.write("\n")


def load_model(path) -> SparseMixture:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def save_batch(batch: WeightedSampleBatch, path) -> None:
    """Write a batch as CSV: one coordinate column per dimension plus weight."""
    header = [f"x{j}" for j in range(batch.d)] + ["weight"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(batch.n):
            writer.writerow([repr(float(v)) for v in batch.points[i]] + [repr(float(batch.weights[i]))])


def load_batch(path) -> WeightedSampleBatch:
    """Read a CSV batch; malformed rows are reported with their line number."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidParameterError(f"{path}: empty file, expected a header row") from None
        if not header or header[-1] != "weight":
            raise InvalidParameterError(f"{path}: expected header ending in 'weight', got {header}")
        d = len(header) - 1
        points, weights = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise InvalidParameterError(
                    f"{path}: line {lineno}: expected {d + 1} columns, got {len(row)}"
                )
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise InvalidParameterError(f"{path}: line {lineno}: {exc}") from None
            points.append(values[:d])
            weights.append(values[d])
    return WeightedSampleBatch(np.asarray(points), np.asarray(weights))
