"""Shared helpers for randomized EM and fitting tests."""

import numpy as np

from spamm.model import (
    DiagWrappedComponent,
    SparseMixture,
    VonMisesComponent,
    WeightedSampleBatch,
    WrappedComponent,
)


def random_index_sets(rng, d, k):
    sets = []
    for _ in range(k):
        size = int(rng.integers(0, min(d, 3) + 1))
        sets.append(tuple(sorted(rng.choice(d, size=size, replace=False).tolist())))
    if all(len(u) == 0 for u in sets):
        sets[0] = (0,)
    return sets


def random_component(rng, family, u):
    n = len(u)
    mu = rng.uniform(0, 1, size=n)
    if family == "wrapped":
        base = rng.uniform(0.005, 0.05, size=n)
        a = rng.uniform(-0.3, 0.3, size=(n, n))
        corr = np.eye(n) + 0.5 * (a + a.T) * (1 - np.eye(n))
        scale = np.sqrt(base)
        sigma = corr * np.outer(scale, scale)
        sigma = sigma + (abs(min(0.0, np.linalg.eigvalsh(sigma).min() if n else 0.0)) + 1e-4) * np.eye(n)
        return WrappedComponent(u, mu, sigma)
    if family == "diag":
        return DiagWrappedComponent(u, mu, rng.uniform(0.005, 0.08, size=n))
    return VonMisesComponent(u, mu, rng.uniform(0.5, 30.0, size=n))


def random_instance(rng, family, d=None, k=None, n=300):
    """A random valid model plus a random weighted batch on T^d."""
    d = d if d is not None else int(rng.integers(1, 4))
    k = k if k is not None else int(rng.integers(1, 5))
    comps = tuple(random_component(rng, family, u) for u in random_index_sets(rng, d, k))
    alpha = rng.dirichlet(np.ones(k))
    model = SparseMixture(d, alpha, comps)
    points = rng.uniform(0, 1, size=(n, d))
    weights = rng.uniform(0.2, 2.0, size=n)
    return model, WeightedSampleBatch(points, weights)


def project_to_simplex(v):
    """Euclidean projection onto the probability simplex (sort algorithm)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, v.size + 1)
    rho = np.max(np.flatnonzero(u - (css - 1.0) / idx > 0))
    theta = (css[rho] - 1.0) / (rho + 1)
    return np.maximum(v - theta, 0.0)


def prox_objective(candidate, alpha, gamma):
    candidate = np.asarray(candidate, dtype=float)
    return float(
        np.sum((candidate - alpha) ** 2) / (2.0 * gamma) + np.count_nonzero(candidate)
    )


def brute_force_prox_minimum(alpha, gamma):
    """Exhaustive minimum of the prox objective over all support sets.

    Enumerates every nonempty support, projects the restricted weights onto
    the matching simplex, and keeps the best objective value.
    """
    from itertools import combinations

    k = len(alpha)
    best = np.inf
    for size in range(1, k + 1):
        for support in combinations(range(k), size):
            candidate = np.zeros(k)
            candidate[list(support)] = project_to_simplex(alpha[list(support)])
            best = min(best, prox_objective(candidate, alpha, gamma))
    return best
