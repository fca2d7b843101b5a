"""EM steps for the three mixture families.

Three variants share one shape: an E-step that computes posterior
responsibilities for hidden labels, and closed-form M-step updates.

* von Mises products: hidden label = component index; responsibilities
  beta[i, k].  The M-step maximizer is analytic via circular resultants,
  with kappa from the inverse Bessel ratio.
* wrapped Gaussians: hidden label = (component, lattice offset);
  responsibilities beta[i, k, l] over a truncated offset box.  The M-step
  is the weighted Gaussian MLE of the unwrapped points x + l.
* diagonal wrapped Gaussians: the box collapses to per-coordinate offset
  responsibilities gamma[i, k, m, j], so the cost is polynomial in |u|.

Everything is evaluated in log space with log-sum-exp combination; the
density ratios involved here reach e^40 and beyond.  Offsets whose best
case contribution is below e^-34 relative are skipped; that changes
nothing at the tolerances used anywhere in this package but keeps the
box sums cheap once components tighten.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Union

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateSampleError
from .model import (
    Component,
    DiagWrappedComponent,
    SparseMixture,
    VonMisesComponent,
    WeightedSampleBatch,
    WrappedComponent,
    effective_truncation,
    neg_log_likelihood,
)
from .torus import (
    LOG_2PI,
    TruncationLevel,
    arctan_star,
    bessel_ratio_A_inverse,
    wrapped_normal_log_terms,
)

__all__ = [
    "EmConfig",
    "EmStepResult",
    "DiagResponsibilities",
    "VonMisesResponsibilities",
    "WrappedResponsibilities",
    "e_step_diag",
    "e_step_von_mises",
    "e_step_wrapped",
    "em_step",
    "m_step_diag",
    "m_step_von_mises",
    "m_step_wrapped",
]

# Components with posterior mass below this are frozen and zeroed.
EMPTY_MASS = 1e-12

# Resultant length clamp and concentration cap for the von Mises M-step.
R_CLAMP = 1e-9
KAPPA_MAX = 1e4

# Variance floor for diagonal updates.
SIGMA2_FLOOR = 1e-8

# Offsets whose best-case relative contribution is below e^-34 are skipped.
_PRUNE_EXPONENT = 34.0


@dataclass(frozen=True)
class EmConfig:
    """Truncation and stopping parameters for EM loops."""

    trunc: TruncationLevel = field(default_factory=TruncationLevel)
    rel_tol: float = 1e-7
    max_iter: int = 200


@dataclass
class VonMisesResponsibilities:
    """Posterior component probabilities beta[i, k]; rows sum to one."""

    beta: np.ndarray


@dataclass
class WrappedResponsibilities:
    """Posterior (component, offset) probabilities.

    blocks[k] has shape (N, L_k) over the offset rows offsets[k]; the
    entries of all blocks sum to one per sample.
    """

    blocks: List[np.ndarray]
    offsets: List[np.ndarray]

    def component_posteriors(self) -> np.ndarray:
        return np.stack([b.sum(axis=1) for b in self.blocks], axis=1)


@dataclass
class DiagResponsibilities:
    """Per-coordinate offset responsibilities gamma[i, k, j, m].

    blocks[k] has shape (N, n_k, M) over the shared offset row m_offsets;
    beta[i, k] is the plain component posterior, which equals
    sum_m gamma[i, k, j, m] for every coordinate j of component k.
    """

    blocks: List[np.ndarray]
    beta: np.ndarray
    m_offsets: np.ndarray

    def component_posteriors(self) -> np.ndarray:
        return self.beta


Responsibilities = Union[VonMisesResponsibilities, WrappedResponsibilities, DiagResponsibilities]


@dataclass(frozen=True)
class EmStepResult:
    """One full E+M cycle and the objective before and after it."""

    model: SparseMixture
    nll_before: float
    nll_after: float


# ---------------------------------------------------------------------------
# Offset boxes
# ---------------------------------------------------------------------------


def _pruned_offsets(variances: np.ndarray, l_max: int) -> np.ndarray:
    """Offset box restricted per dimension to radii that can matter.

    For |x_j - mu_j| < 1 the exponent of offset l is at least
    (|l_j| - 1)^2 / (2 sigma_jj) for every j, so offsets beyond the
    per-dimension radius contribute less than e^-34 relatively.
    """
    radii = 1 + np.floor(np.sqrt(2.0 * _PRUNE_EXPONENT * np.asarray(variances))).astype(int)
    radii = np.minimum(radii, l_max)
    ranges = [np.arange(-r, r + 1, dtype=np.int64) for r in radii]
    if not ranges:
        return np.zeros((1, 0), dtype=np.int64)
    grids = np.meshgrid(*ranges, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _full_offsets(n: int, l_max: int) -> np.ndarray:
    from .torus import lattice_offsets

    return lattice_offsets(n, l_max)


# ---------------------------------------------------------------------------
# Von Mises family
# ---------------------------------------------------------------------------


def _log_weighted_component_pdfs(
    model: SparseMixture, points: np.ndarray, trunc: TruncationLevel
) -> np.ndarray:
    """Matrix of log alpha_k + log p_k(x_i), with -inf columns for alpha_k = 0."""
    from .model import component_log_pdf

    n = points.shape[0]
    out = np.empty((n, model.n_components))
    for k, comp in enumerate(model.components):
        if model.alpha[k] == 0.0:
            out[:, k] = -np.inf
        else:
            out[:, k] = np.log(model.alpha[k]) + component_log_pdf(comp, points, trunc)
    return out


def _check_denominator(log_denom: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(log_denom))
    if bad.size:
        raise DegenerateSampleError(int(bad[0]))


def e_step_von_mises(model: SparseMixture, batch: WeightedSampleBatch) -> VonMisesResponsibilities:
    """Posterior beta[i, k] = alpha_k p_k(x^i) / sum_j alpha_j p_j(x^i)."""
    lognum = _log_weighted_component_pdfs(model, batch.points, effective_truncation(model))
    log_denom = logsumexp(lognum, axis=1)
    _check_denominator(log_denom)
    return VonMisesResponsibilities(beta=np.exp(lognum - log_denom[:, None]))


def _update_von_mises_component(
    comp: VonMisesComponent, x_u: np.ndarray, wbeta: np.ndarray, mass: float
) -> VonMisesComponent:
    ang = 2.0 * np.pi * x_u
    C = wbeta @ np.cos(ang)
    S = wbeta @ np.sin(ang)
    mu = np.array(comp.mu, dtype=float)
    kappa = np.empty(len(comp.u))
    for j in range(len(comp.u)):
        if S[j] != 0.0 or C[j] != 0.0:
            mu[j] = arctan_star(S[j], C[j]) / (2.0 * np.pi)
        r = np.hypot(S[j], C[j]) / mass
        r = min(max(r, R_CLAMP), 1.0 - R_CLAMP)
        kappa[j] = min(bessel_ratio_A_inverse(r), KAPPA_MAX)
    return VonMisesComponent(comp.u, mu, kappa)


def m_step_von_mises(
    model: SparseMixture, batch: WeightedSampleBatch, resp: VonMisesResponsibilities
) -> SparseMixture:
    """Closed-form update of (alpha, mu, kappa) from circular resultants."""
    n = batch.n
    wbeta = resp.beta * batch.weights[:, None]
    masses = wbeta.sum(axis=0)
    alpha = masses / n
    comps = []
    for k, comp in enumerate(model.components):
        if masses[k] < EMPTY_MASS or not comp.u:
            alpha[k] = 0.0 if masses[k] < EMPTY_MASS else alpha[k]
            comps.append(comp)
            continue
        comps.append(
            _update_von_mises_component(comp, batch.points[:, list(comp.u)], wbeta[:, k], masses[k])
        )
    alpha = alpha / alpha.sum()
    return SparseMixture(model.d, alpha, tuple(comps))


# ---------------------------------------------------------------------------
# Wrapped Gaussian family
# ---------------------------------------------------------------------------


def _wrapped_log_terms(
    comp: WrappedComponent, points: np.ndarray, trunc: TruncationLevel, prune: bool
):
    """Offset rows and the (N, L) matrix of log N(x_u + l | mu, sigma)."""
    x_u = points[:, list(comp.u)]
    if prune:
        offsets = _pruned_offsets(np.diag(comp.sigma), trunc.l_max)
    else:
        offsets = _full_offsets(len(comp.u), trunc.l_max)
    return x_u, offsets, wrapped_normal_log_terms(x_u, comp.mu, comp.sigma, offsets)


def e_step_wrapped(
    model: SparseMixture, batch: WeightedSampleBatch, trunc: TruncationLevel | None = None
) -> WrappedResponsibilities:
    """Posterior over (component, offset) labels on the full offset box."""
    trunc = effective_truncation(model, trunc)
    with np.errstate(divide="ignore"):
        log_alpha = np.log(model.alpha)
    lognums = []
    full_offsets = []
    for k, comp in enumerate(model.components):
        offsets = _full_offsets(len(comp.u), trunc.l_max)
        full_offsets.append(offsets)
        if model.alpha[k] == 0.0:
            lognums.append(np.full((batch.n, offsets.shape[0]), -np.inf))
            continue
        _, _, terms = _wrapped_log_terms(comp, batch.points, trunc, prune=False)
        lognums.append(log_alpha[k] + terms)
    log_denom = logsumexp(np.concatenate(lognums, axis=1), axis=1)
    _check_denominator(log_denom)
    blocks = [np.exp(t - log_denom[:, None]) for t in lognums]
    return WrappedResponsibilities(blocks=blocks, offsets=full_offsets)


def _update_wrapped_component(
    comp: WrappedComponent, x_u: np.ndarray, bw: np.ndarray, offsets: np.ndarray, mass: float
) -> WrappedComponent:
    """Weighted Gaussian MLE on the unwrapped points x + l.

    The covariance uses the pre-reduction mean; mu is reduced modulo 1
    afterwards since the offset shifts can move it out of [0, 1).
    """
    off = offsets.astype(float)
    row = bw.sum(axis=1)
    col = bw.sum(axis=0)
    mu_raw = (row @ x_u + col @ off) / mass
    z = x_u - mu_raw
    c = bw @ off
    s_zz = (z * row[:, None]).T @ z
    s_zc = z.T @ c
    s_cc = (off * col[:, None]).T @ off
    sigma = (s_zz + s_zc + s_zc.T + s_cc) / mass
    return WrappedComponent(comp.u, np.mod(mu_raw, 1.0), sigma)


def m_step_wrapped(
    model: SparseMixture,
    batch: WeightedSampleBatch,
    resp: WrappedResponsibilities,
    trunc: TruncationLevel | None = None,
) -> SparseMixture:
    """Closed-form update of (alpha, mu, Sigma) from offset responsibilities."""
    n = batch.n
    alpha = np.empty(model.n_components)
    comps = []
    for k, comp in enumerate(model.components):
        bw = resp.blocks[k] * batch.weights[:, None]
        mass = bw.sum()
        alpha[k] = mass / n
        if mass < EMPTY_MASS or not comp.u:
            alpha[k] = 0.0 if mass < EMPTY_MASS else alpha[k]
            comps.append(comp)
            continue
        x_u = batch.points[:, list(comp.u)]
        comps.append(_update_wrapped_component(comp, x_u, bw, resp.offsets[k], mass))
    alpha = alpha / alpha.sum()
    return SparseMixture(model.d, alpha, tuple(comps))


def _em_update_wrapped(model: SparseMixture, batch: WeightedSampleBatch, trunc: TruncationLevel):
    """Fused E+M cycle with pruned offset boxes; returns (new model, nll of input)."""
    n = batch.n
    with np.errstate(divide="ignore"):
        log_alpha = np.log(model.alpha)
    terms = []
    geometry = []
    log_pdf = np.empty((n, model.n_components))
    for k, comp in enumerate(model.components):
        if model.alpha[k] == 0.0:
            terms.append(None)
            geometry.append((None, None))
            log_pdf[:, k] = -np.inf
            continue
        x_u, offsets, t = _wrapped_log_terms(comp, batch.points, trunc, prune=True)
        terms.append(t)
        geometry.append((x_u, offsets))
        log_pdf[:, k] = log_alpha[k] + logsumexp(t, axis=1)
    log_denom = logsumexp(log_pdf, axis=1)
    _check_denominator(log_denom)
    nll_current = float(-np.dot(batch.weights, log_denom))

    alpha = np.empty(model.n_components)
    comps = []
    for k, comp in enumerate(model.components):
        if terms[k] is None:
            alpha[k] = 0.0
            comps.append(comp)
            continue
        t = terms[k]
        np.exp(t + (log_alpha[k] - log_denom)[:, None], out=t)
        t *= batch.weights[:, None]
        mass = t.sum()
        alpha[k] = mass / n
        if mass < EMPTY_MASS or not comp.u:
            alpha[k] = 0.0 if mass < EMPTY_MASS else alpha[k]
            comps.append(comp)
            continue
        x_u, offsets = geometry[k]
        comps.append(_update_wrapped_component(comp, x_u, t, offsets, mass))
        terms[k] = None  # free the block before the next component
    alpha = alpha / alpha.sum()
    return SparseMixture(model.d, alpha, tuple(comps)), nll_current


# ---------------------------------------------------------------------------
# Diagonal wrapped Gaussian family
# ---------------------------------------------------------------------------


def _diag_coordinate_terms(
    comp: DiagWrappedComponent, points: np.ndarray, m_offsets: np.ndarray
) -> np.ndarray:
    """(N, n, M) array of log N(x_j + m | mu_j, sigma_j^2)."""
    x_u = points[:, list(comp.u)]
    z = x_u[:, :, None] + m_offsets[None, None, :] - comp.mu[None, :, None]
    s2 = comp.sigma2[None, :, None]
    return -0.5 * z * z / s2 - 0.5 * (LOG_2PI + np.log(s2))


def e_step_diag(
    model: SparseMixture, batch: WeightedSampleBatch, trunc: TruncationLevel | None = None
) -> DiagResponsibilities:
    """Per-coordinate offset responsibilities, computed without any |u|-dim box."""
    trunc = effective_truncation(model, trunc)
    m_offsets = np.arange(-trunc.l_max, trunc.l_max + 1, dtype=np.int64)
    with np.errstate(divide="ignore"):
        log_alpha = np.log(model.alpha)
    n = batch.n
    coord_terms = []
    log_pdf = np.empty((n, model.n_components))
    for k, comp in enumerate(model.components):
        if model.alpha[k] == 0.0:
            coord_terms.append(None)
            log_pdf[:, k] = -np.inf
            continue
        terms = _diag_coordinate_terms(comp, batch.points, m_offsets.astype(float))
        coord_terms.append(terms)
        log_pdf[:, k] = log_alpha[k] + logsumexp(terms, axis=2).sum(axis=1)
    log_denom = logsumexp(log_pdf, axis=1)
    _check_denominator(log_denom)
    beta = np.exp(log_pdf - log_denom[:, None])

    blocks = []
    for k, comp in enumerate(model.components):
        n_k = len(comp.u)
        if coord_terms[k] is None:
            blocks.append(np.zeros((n, n_k, m_offsets.size)))
            continue
        terms = coord_terms[k]
        per_coord = logsumexp(terms, axis=2)  # (N, n_k)
        base = (log_pdf[:, k] - log_denom)[:, None, None]
        blocks.append(np.exp(base - per_coord[:, :, None] + terms))
    return DiagResponsibilities(blocks=blocks, beta=beta, m_offsets=m_offsets)


def _update_diag_component(
    comp: DiagWrappedComponent,
    x_u: np.ndarray,
    gw: np.ndarray,
    m_offsets: np.ndarray,
    mass: float,
) -> DiagWrappedComponent:
    """Per-coordinate weighted Gaussian MLE on the unwrapped values x_j + m."""
    shifted = x_u[:, :, None] + m_offsets[None, None, :].astype(float)
    mu_raw = np.einsum("ijm,ijm->j", gw, shifted) / mass
    dev = shifted - mu_raw[None, :, None]
    sigma2 = np.einsum("ijm,ijm->j", gw, dev * dev) / mass
    sigma2 = np.maximum(sigma2, SIGMA2_FLOOR)
    return DiagWrappedComponent(comp.u, np.mod(mu_raw, 1.0), sigma2)


def m_step_diag(
    model: SparseMixture,
    batch: WeightedSampleBatch,
    resp: DiagResponsibilities,
    trunc: TruncationLevel | None = None,
) -> SparseMixture:
    """Closed-form per-coordinate update of (alpha, mu, sigma^2)."""
    n = batch.n
    masses = batch.weights @ resp.beta
    alpha = masses / n
    comps = []
    for k, comp in enumerate(model.components):
        if masses[k] < EMPTY_MASS or not comp.u:
            alpha[k] = 0.0 if masses[k] < EMPTY_MASS else alpha[k]
            comps.append(comp)
            continue
        gw = resp.blocks[k] * batch.weights[:, None, None]
        x_u = batch.points[:, list(comp.u)]
        comps.append(
            _update_diag_component(comp, x_u, gw, resp.m_offsets, masses[k])
        )
    alpha = alpha / alpha.sum()
    return SparseMixture(model.d, alpha, tuple(comps))


def _em_update_diag(model: SparseMixture, batch: WeightedSampleBatch, trunc: TruncationLevel):
    """Fused E+M cycle processing one component block at a time."""
    n = batch.n
    m_offsets = np.arange(-trunc.l_max, trunc.l_max + 1, dtype=np.int64)
    with np.errstate(divide="ignore"):
        log_alpha = np.log(model.alpha)
    coord_terms = []
    log_pdf = np.empty((n, model.n_components))
    for k, comp in enumerate(model.components):
        if model.alpha[k] == 0.0:
            coord_terms.append(None)
            log_pdf[:, k] = -np.inf
            continue
        terms = _diag_coordinate_terms(comp, batch.points, m_offsets.astype(float))
        coord_terms.append(terms)
        log_pdf[:, k] = log_alpha[k] + logsumexp(terms, axis=2).sum(axis=1)
    log_denom = logsumexp(log_pdf, axis=1)
    _check_denominator(log_denom)
    nll_current = float(-np.dot(batch.weights, log_denom))

    log_beta = log_pdf - log_denom[:, None]
    masses = batch.weights @ np.exp(log_beta)
    alpha = masses / n
    comps = []
    for k, comp in enumerate(model.components):
        if coord_terms[k] is None or masses[k] < EMPTY_MASS or not comp.u:
            alpha[k] = 0.0 if (coord_terms[k] is None or masses[k] < EMPTY_MASS) else alpha[k]
            comps.append(comp)
            continue
        terms = coord_terms[k]
        per_coord = logsumexp(terms, axis=2)
        gw = np.exp(log_beta[:, k][:, None, None] - per_coord[:, :, None] + terms)
        gw *= batch.weights[:, None, None]
        x_u = batch.points[:, list(comp.u)]
        comps.append(_update_diag_component(comp, x_u, gw, m_offsets, masses[k]))
        coord_terms[k] = None
    alpha = alpha / alpha.sum()
    return SparseMixture(model.d, alpha, tuple(comps)), nll_current


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def _em_update_von_mises(model: SparseMixture, batch: WeightedSampleBatch, trunc: TruncationLevel):
    lognum = _log_weighted_component_pdfs(model, batch.points, trunc)
    log_denom = logsumexp(lognum, axis=1)
    _check_denominator(log_denom)
    nll_current = float(-np.dot(batch.weights, log_denom))
    resp = VonMisesResponsibilities(beta=np.exp(lognum - log_denom[:, None]))
    return m_step_von_mises(model, batch, resp), nll_current


def em_update(model: SparseMixture, batch: WeightedSampleBatch, trunc: TruncationLevel | None = None):
    """One E+M cycle; returns (updated model, nll of the input model)."""
    trunc = effective_truncation(model, trunc)
    if model.family == "vonmises":
        return _em_update_von_mises(model, batch, trunc)
    if model.family == "wrapped":
        return _em_update_wrapped(model, batch, trunc)
    return _em_update_diag(model, batch, trunc)


def em_step(
    model: SparseMixture, batch: WeightedSampleBatch, config: EmConfig | None = None
) -> EmStepResult:
    """One full E+M cycle with the objective recorded before and after."""
    config = config if config is not None else EmConfig()
    new_model, nll_before = em_update(model, batch, config.trunc)
    nll_after = neg_log_likelihood(new_model, batch, config.trunc)
    return EmStepResult(model=new_model, nll_before=nll_before, nll_after=nll_after)
