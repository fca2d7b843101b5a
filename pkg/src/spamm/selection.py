"""Coupling discovery: grow index sets from the uniform model by testing.

Starting from the single uniform component, each round computes component
posteriors, tests every unused coordinate per component for uniformity
(weighted KS) and for correlation with the component's coordinates, and
adds one component per rejection with the new coordinate initialized from
weighted circular moments.  A penalized fit plus a KL merge then shrink
the expanded model back down.  Rounds cap the interaction order, so d_s
rounds never produce a coupling larger than d_s.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .em import EmConfig
from .errors import UndefinedStatisticError
from .model import (
    Component,
    DiagWrappedComponent,
    SparseMixture,
    VonMisesComponent,
    WeightedSampleBatch,
    WrappedComponent,
    component_log_pdf,
    effective_truncation,
    neg_log_likelihood,
    uniform_mixture,
)
from .sparsity import FitTrace, ProxConfig, default_prox_config, merge_similar, penalized_fit
from .torus import arctan_star, bessel_ratio_A_inverse

__all__ = [
    "FitReport",
    "KsStatistic",
    "SelectionConfig",
    "correlation_rejected",
    "expand_components",
    "select_and_fit",
    "uniformity_rejected",
    "weighted_ks_uniform",
]

SIGMA2_EXPANSION_FLOOR = 1e-4
KAPPA_EXPANSION_CAP = 1e4
_R_CLAMP = 1e-9


@dataclass(frozen=True)
class KsStatistic:
    """Weighted KS statistic and the effective sample size behind it."""

    value: float
    effective_n: float


@dataclass(frozen=True)
class SelectionConfig:
    """Knobs of the coupling-selection heuristic."""

    family: str = "diag"
    d_s: int = 3
    c1: float = 1.36
    c2: float = 0.1
    n_mc: int = 2000
    kl_threshold: float = 0.15
    prox: Optional[ProxConfig] = None
    em: EmConfig = field(default_factory=EmConfig)

    def resolved_prox(self, n_samples: int) -> ProxConfig:
        return self.prox if self.prox is not None else default_prox_config(n_samples)


def weighted_ks_uniform(samples: np.ndarray, weights: np.ndarray) -> KsStatistic:
    """Weighted KS statistic against the uniform distribution on [0, 1].

    With sorted samples and cumulative normalized weights s_i, the sup
    deviation of the weighted empirical CDF from the identity is
    max_i max(s_i - x_i, x_i - s_{i-1}); the statistic scales it by the
    square root of the effective sample size (sum w)^2 / sum w^2.
    """
    samples = np.asarray(samples, dtype=float).reshape(-1)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if samples.shape != weights.shape:
        raise UndefinedStatisticError("samples and weights must have equal length")
    wsum = weights.sum()
    wsq = float(weights @ weights)
    if wsum <= 0.0 or wsq <= 0.0:
        raise UndefinedStatisticError("the KS statistic needs at least one positive weight")
    order = np.argsort(samples, kind="stable")
    x = samples[order]
    s = np.cumsum(weights[order]) / wsum
    s_prev = np.concatenate([[0.0], s[:-1]])
    deviation = float(np.max(np.maximum(s - x, x - s_prev)))
    effective_n = wsum * wsum / wsq
    return KsStatistic(value=float(np.sqrt(effective_n) * deviation), effective_n=effective_n)


def uniformity_rejected(samples: np.ndarray, weights: np.ndarray, c1: float) -> bool:
    """Reject uniformity iff the weighted KS statistic reaches c1."""
    return weighted_ks_uniform(samples, weights).value >= c1


def _weighted_corr(w: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    wsum = w.sum()
    if wsum <= 0:
        return 0.0
    am = float(w @ a) / wsum
    bm = float(w @ b) / wsum
    da = a - am
    db = b - bm
    va = float(w @ (da * da))
    vb = float(w @ (db * db))
    if va <= 0.0 or vb <= 0.0:
        return 0.0
    return float(w @ (da * db)) / np.sqrt(va * vb)


def correlation_rejected(
    weights_beta: np.ndarray, x_m: np.ndarray, x_u: np.ndarray, c2: float
) -> bool:
    """Reject iff x_m correlates with any component coordinate.

    Uses the weighted Pearson correlation under the posterior-scaled
    weights; series with zero weighted variance count as uncorrelated.
    An empty coordinate block never rejects.
    """
    x_u = np.asarray(x_u, dtype=float)
    if x_u.ndim == 1:
        x_u = x_u[:, None]
    for j in range(x_u.shape[1]):
        if abs(_weighted_corr(weights_beta, x_m, x_u[:, j])) >= c2:
            return True
    return False


def _component_posteriors(model: SparseMixture, batch: WeightedSampleBatch) -> np.ndarray:
    from scipy.special import logsumexp

    trunc = effective_truncation(model)
    lognum = np.empty((batch.n, model.n_components))
    with np.errstate(divide="ignore"):
        log_alpha = np.log(model.alpha)
    for k, comp in enumerate(model.components):
        if model.alpha[k] == 0.0:
            lognum[:, k] = -np.inf
        else:
            lognum[:, k] = log_alpha[k] + component_log_pdf(comp, batch.points, trunc)
    return np.exp(lognum - logsumexp(lognum, axis=1)[:, None])


def _circular_moments(x: np.ndarray, w: np.ndarray) -> Tuple[float, float]:
    """Weighted circular mean in [0, 1) and clamped resultant length."""
    ang = 2.0 * np.pi * x
    c = float(w @ np.cos(ang))
    s = float(w @ np.sin(ang))
    wsum = float(w.sum())
    r = np.hypot(c, s) / wsum
    r = min(max(r, _R_CLAMP), 1.0 - _R_CLAMP)
    mu = 0.0 if (s == 0.0 and c == 0.0) else arctan_star(s, c) / (2.0 * np.pi)
    return mu, r


def _expanded_component(comp: Component, m: int, mu_hat: float, r_hat: float) -> Component:
    """Parent component times an independent factor on coordinate m."""
    u_new = tuple(sorted(comp.u + (m,)))
    pos = u_new.index(m)
    old_pos = [i for i in range(len(u_new)) if i != pos]
    mu = np.empty(len(u_new))
    mu[old_pos] = comp.mu
    mu[pos] = mu_hat

    if isinstance(comp, WrappedComponent):
        sigma2_hat = max(-2.0 * np.log(r_hat) / (2.0 * np.pi) ** 2, SIGMA2_EXPANSION_FLOOR)
        sigma = np.zeros((len(u_new), len(u_new)))
        sigma[np.ix_(old_pos, old_pos)] = comp.sigma
        sigma[pos, pos] = sigma2_hat
        return WrappedComponent(u_new, mu, sigma)
    if isinstance(comp, DiagWrappedComponent):
        sigma2_hat = max(-2.0 * np.log(r_hat) / (2.0 * np.pi) ** 2, SIGMA2_EXPANSION_FLOOR)
        sigma2 = np.empty(len(u_new))
        sigma2[old_pos] = comp.sigma2
        sigma2[pos] = sigma2_hat
        return DiagWrappedComponent(u_new, mu, sigma2)
    if isinstance(comp, VonMisesComponent):
        kappa_hat = min(bessel_ratio_A_inverse(r_hat), KAPPA_EXPANSION_CAP)
        kappa = np.empty(len(u_new))
        kappa[old_pos] = comp.kappa
        kappa[pos] = kappa_hat
        return VonMisesComponent(u_new, mu, kappa)
    raise TypeError(f"unknown component type {type(comp)!r}")


def expand_components(
    model: SparseMixture, batch: WeightedSampleBatch, cfg: SelectionConfig
) -> SparseMixture:
    """Grow each component by every coordinate that fails a test.

    For component k with posterior weights w_i beta_{i,k}, each unused
    coordinate m is KS-tested for uniformity and correlation-tested
    against the component's own coordinates; each rejection adds a child
    on u_k + {m}.  The parent always stays, and its weight is split
    equally over the parent and its children.
    """
    beta = _component_posteriors(model, batch)
    new_components: List[Component] = []
    new_alpha: List[float] = []
    for k, comp in enumerate(model.components):
        members: List[Component] = [comp]
        wb = batch.weights * beta[:, k]
        if wb.sum() > 0.0:
            u_cols = batch.points[:, list(comp.u)] if comp.u else None
            for m in range(model.d):
                if m in comp.u:
                    continue
                x_m = batch.points[:, m]
                rejected = uniformity_rejected(x_m, wb, cfg.c1)
                if not rejected and u_cols is not None:
                    rejected = correlation_rejected(wb, x_m, u_cols, cfg.c2)
                if rejected:
                    mu_hat, r_hat = _circular_moments(x_m, wb)
                    members.append(_expanded_component(comp, m, mu_hat, r_hat))
        share = model.alpha[k] / len(members)
        new_components.extend(members)
        new_alpha.extend([share] * len(members))
    alpha = np.asarray(new_alpha)
    return SparseMixture(model.d, alpha / alpha.sum(), tuple(new_components))


@dataclass
class FitReport:
    """Recovered couplings with aggregated weights plus fit diagnostics."""

    couplings: List[Tuple[tuple, float]]
    nll: float
    traces: List[FitTrace] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def coupling_weight(self, u) -> float:
        u = tuple(sorted(int(i) for i in u))
        for coupling, weight in self.couplings:
            if coupling == u:
                return weight
        return 0.0

    def to_dict(self, trace_file: Optional[str] = None) -> dict:
        doc = {
            "couplings": [
                {"u": list(u), "weight": float(w)} for u, w in self.couplings
            ],
            "nll": self.nll,
            "metrics": self.metrics,
        }
        if trace_file is not None:
            doc["trace_file"] = trace_file
        return doc

    def write_json(self, path, trace_file: Optional[str] = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(trace_file), fh, indent=2)
            fh.write("\n")

    def write_couplings_csv(self, path) -> None:
        import csv

        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["coupling_label", "aggregated_weight"])
            for u, w in self.couplings:
                label = "{" + ",".join(str(i) for i in u) + "}"
                writer.writerow([label, repr(float(w))])


def aggregate_couplings(model: SparseMixture) -> List[Tuple[tuple, float]]:
    """Sum weights over components sharing an index set, heaviest first."""
    acc: dict = {}
    for k, comp in enumerate(model.components):
        acc[comp.u] = acc.get(comp.u, 0.0) + float(model.alpha[k])
    return sorted(acc.items(), key=lambda item: (-item[1], item[0]))


def select_and_fit(
    batch: WeightedSampleBatch, cfg: SelectionConfig, rng_seed
) -> Tuple[SparseMixture, FitReport]:
    """Full selection loop: d_s rounds of expand, penalized fit, reduce."""
    prox_cfg = cfg.resolved_prox(batch.n)
    seeds = np.random.SeedSequence(rng_seed).spawn(cfg.d_s)
    model = uniform_mixture(batch.d, cfg.family)
    traces: List[FitTrace] = []
    for round_idx in range(cfg.d_s):
        expanded = expand_components(model, batch, cfg)
        fitted, trace = penalized_fit(expanded, batch, prox_cfg, cfg.em)
        model = merge_similar(fitted, cfg.n_mc, cfg.kl_threshold, seeds[round_idx])
        traces.append(trace)
    report = FitReport(
        couplings=aggregate_couplings(model),
        nll=neg_log_likelihood(model, batch, cfg.em.trunc),
        traces=traces,
    )
    return model, report
