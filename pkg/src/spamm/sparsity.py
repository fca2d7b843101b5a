"""The l0 + simplex proximal step and the alternating EM + prox fit loop.

The prox of gamma * (||.||_0 + indicator of the simplex) zeroes the
smallest weights and redistributes their mass equally over the survivors.
The number of zeroed entries minimizes

    g(n) = (1/2 gamma) (sum of n smallest)^2 / (K - n)
         + (1/2 gamma) (sum of their squares) - n

over n in {0, ..., K-1}, which sorting makes an O(K log K) computation.
Zero weights always stay zero, so the support can only shrink; the fit
loop therefore alternates one EM cycle with one prox application until
the support is stable and the penalized objective stalls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .em import EmConfig, em_update
from .errors import InvalidParameterError
from .model import (
    SparseMixture,
    WeightedSampleBatch,
    effective_truncation,
    neg_log_likelihood,
    sample_component,
)

__all__ = [
    "FitTrace",
    "ProxConfig",
    "default_prox_config",
    "merge_similar",
    "penalized_fit",
    "prox_l0_simplex",
]

MAX_OUTER_ITERATIONS = 500


@dataclass(frozen=True)
class ProxConfig:
    """Prox step size gamma and the component-count penalty weight."""

    gamma: float = 5e-5
    lam: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0 or self.lam <= 0:
            raise InvalidParameterError("gamma and lam must be positive")


def default_prox_config(n_samples: int) -> ProxConfig:
    """Defaults scaled to the batch size: lam = 0.1 N / 1000."""
    return ProxConfig(gamma=5e-5, lam=0.1 * n_samples / 1000.0)


def prox_l0_simplex(alpha: np.ndarray, gamma: float) -> np.ndarray:
    """Proximal map of gamma (||.||_0 + simplex indicator) at alpha.

    Sorts ascending (stable on original index), finds the minimizing cut
    K0 of g(n), zeroes the K0 smallest entries and spreads their mass
    equally over the rest.  Ties in the argmin go to the smaller n, so a
    vanishing step keeps alpha unchanged.
    """
    if gamma <= 0:
        raise InvalidParameterError("gamma must be positive")
    alpha = np.asarray(alpha, dtype=float)
    k = alpha.shape[0]
    if np.any(alpha < -1e-9) or abs(alpha.sum() - 1.0) > 1e-9:
        raise InvalidParameterError("alpha must lie on the probability simplex")

    order = np.argsort(alpha, kind="stable")
    s = alpha[order]
    prefix = np.concatenate([[0.0], np.cumsum(s)[:-1]])  # sum of the n smallest
    prefix_sq = np.concatenate([[0.0], np.cumsum(s * s)[:-1]])
    n = np.arange(k)
    g = (prefix * prefix / (k - n) + prefix_sq) / (2.0 * gamma) - n
    k0 = int(np.argmin(g))  # first minimum: ties break toward smaller n
    if k0 == 0:
        return alpha.copy()

    out = alpha.copy()
    out[order[:k0]] = 0.0
    out[order[k0:]] += prefix[k0] / (k - k0)
    return out


@dataclass
class FitTrace:
    """Per-iteration record of the penalized objective and the support size.

    lambda_quotients holds the empirical descent quotients of the
    support-changing iterations; the objective with any penalty weight
    above their maximum is monotone.
    """

    iterations: List[int] = field(default_factory=list)
    penalized_objective: List[float] = field(default_factory=list)
    nll: List[float] = field(default_factory=list)
    nnz_alpha: List[int] = field(default_factory=list)
    k_alive: List[int] = field(default_factory=list)
    lambda_quotients: List[float] = field(default_factory=list)

    def append(self, iteration, objective, nll, nnz, k_alive):
        self.iterations.append(int(iteration))
        self.penalized_objective.append(float(objective))
        self.nll.append(float(nll))
        self.nnz_alpha.append(int(nnz))
        self.k_alive.append(int(k_alive))

    def rows(self) -> List[Tuple[int, float, int, int]]:
        return list(
            zip(self.iterations, self.penalized_objective, self.nnz_alpha, self.k_alive)
        )

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "L_lambda", "nnz_alpha", "K_alive"])
            for row in self.rows():
                writer.writerow([row[0], repr(row[1]), row[2], row[3]])


def _support(alpha: np.ndarray) -> np.ndarray:
    return alpha > 0.0


def penalized_fit(
    model0: SparseMixture,
    batch: WeightedSampleBatch,
    prox_cfg: ProxConfig,
    em_cfg: Optional[EmConfig] = None,
    max_outer: int = MAX_OUTER_ITERATIONS,
) -> Tuple[SparseMixture, FitTrace]:
    """Minimize nll + lam ||alpha||_0 over the simplex by EM + prox cycles.

    Stops once the support is stable across an iteration and the relative
    change of the penalized objective falls below the EM tolerance, or
    after max_outer iterations.  Components with weight exactly zero are
    removed from the returned model.
    """
    em_cfg = em_cfg if em_cfg is not None else EmConfig()
    model = model0
    trace = FitTrace()
    prev_objective = None
    prev_support = _support(model.alpha)

    for r in range(max_outer):
        half_model, nll_curr = em_update(model, batch, em_cfg.trunc)
        nnz = int(np.count_nonzero(model.alpha))
        objective = nll_curr + prox_cfg.lam * nnz
        trace.append(r, objective, nll_curr, nnz, model.n_components)

        support = _support(model.alpha)
        if (
            prev_objective is not None
            and np.array_equal(support, prev_support)
            and abs(objective - prev_objective) <= em_cfg.rel_tol * max(1.0, abs(prev_objective))
        ):
            break
        prev_objective = objective
        prev_support = support

        alpha_next = prox_l0_simplex(half_model.alpha, prox_cfg.gamma)
        next_model = SparseMixture(half_model.d, alpha_next, half_model.components)
        if np.count_nonzero(alpha_next) < np.count_nonzero(half_model.alpha):
            # Empirical quotient lambda_r of this support change; the
            # penalized objective is monotone for any lam above all of them.
            trunc = effective_truncation(half_model, em_cfg.trunc)
            nll_half = neg_log_likelihood(half_model, batch, trunc)
            nll_next = neg_log_likelihood(next_model, batch, trunc)
            drop = np.count_nonzero(half_model.alpha) - np.count_nonzero(alpha_next)
            trace.lambda_quotients.append((nll_next - nll_half) / drop)
        model = next_model

    keep = np.flatnonzero(model.alpha > 0.0)
    pruned = SparseMixture(
        model.d, model.alpha[keep], tuple(model.components[i] for i in keep)
    )
    return pruned, trace


def _symmetric_kl(comp_a, comp_b, n_mc: int, rng: np.random.Generator, trunc) -> float:
    """Monte Carlo symmetrized KL divergence between two same-u components."""
    if not comp_a.u:
        return 0.0
    sa = sample_component(comp_a, n_mc, rng)
    sb = sample_component(comp_b, n_mc, rng)
    kl_ab = float(np.mean(comp_a.log_pdf(sa, trunc) - comp_b.log_pdf(sa, trunc)))
    kl_ba = float(np.mean(comp_b.log_pdf(sb, trunc) - comp_a.log_pdf(sb, trunc)))
    return 0.5 * (kl_ab + kl_ba)


def merge_similar(
    model: SparseMixture, n_mc: int, kl_threshold: float, rng_seed
) -> SparseMixture:
    """Drop zero-weight components and merge near-duplicates.

    Components sharing an index set whose symmetrized Monte Carlo KL
    divergence is below the threshold are combined: weights add up and
    the higher-weight member donates the parameters.
    """
    rng = np.random.default_rng(rng_seed)
    trunc = effective_truncation(model)

    alive = [i for i in range(model.n_components) if model.alpha[i] > 0.0]
    weights = {i: float(model.alpha[i]) for i in alive}
    absorbed = set()

    groups: dict = {}
    for i in alive:
        groups.setdefault(model.components[i].u, []).append(i)

    for u in sorted(groups):
        members = sorted(groups[u], key=lambda i: (-weights[i], i))
        survivors: List[int] = []
        for i in members:
            target = None
            for j in survivors:
                kl = _symmetric_kl(
                    model.components[j], model.components[i], n_mc, rng, trunc
                )
                if kl < kl_threshold:
                    target = j
                    break
            if target is None:
                survivors.append(i)
            else:
                weights[target] += weights[i]
                absorbed.add(i)

    keep = [i for i in alive if i not in absorbed]
    alpha = np.array([weights[i] for i in keep])
    return SparseMixture(model.d, alpha, tuple(model.components[i] for i in keep))
