"""Post-fit inference: uncertainty maps, joint excursion sets, and tests.

Engagement and deviation regions come from the joint posterior of the IC
field rather than from per-location marginals: an excursion set at level
gamma is the largest region whose locations all exceed gamma with joint
posterior probability 1 - alpha.  The search runs over the one-parameter
family of sets ordered by marginal exceedance probability, with the joint
probabilities estimated by Monte Carlo draws from the fitted sparse
posterior.  The template-only variant gets a per-location z-test with
Bonferroni correction instead (the posterior there is exactly Gaussian
with known scale, so the Gaussian reference is used rather than a t).
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .em import FitResult, PosteriorMoments

_CHUNK = 512


class InsufficientSamples(ValueError):
    """Monte Carlo error at the decision boundary exceeds alpha / 10."""


class ConstantColumn(ValueError):
    """A timecourse has zero variance, so correlation is undefined."""


@dataclass(frozen=True)
class ExcursionResult:
    """Excursion set for one IC field and direction.

    mask marks the selected locations; attained_joint_prob is the Monte
    Carlo estimate of P(all masked locations exceed) for the returned set
    (1.0 for the empty set).
    """

    mask: np.ndarray
    gamma: float
    alpha: float
    direction: str
    attained_joint_prob: float
    n_samples: int


def marginal_sd(fit):
    """Per-IC posterior SD maps, sqrt of the diagonal of D Omega^-1 D.

    Accepts a FitResult (recomputing from retained moments when present)
    or PosteriorMoments directly.
    """
    if isinstance(fit, PosteriorMoments):
        moments = fit
    elif isinstance(fit, FitResult):
        if fit.moments is None:
            return fit.marginal_sd.copy()
        moments = fit.moments
    else:
        raise TypeError("expected FitResult or PosteriorMoments")
    l = moments.d.shape[0]
    diag = moments.omega_inv_blocks[:, np.arange(l), np.arange(l)].T
    return moments.d * np.sqrt(np.maximum(diag, 0.0))


def _marginal_exceedance(field_mean, sd, gamma, direction):
    """P(value beyond gamma in the given direction), location-wise."""
    shifted = field_mean - gamma if direction == "positive" \
        else -gamma - field_mean
    with np.errstate(divide="ignore", invalid="ignore"):
        p = norm.cdf(shifted / sd)
    return np.where(sd > 0, p, (shifted > 0).astype(np.float64))


def excursion_set(field_mean, moments, ic, gamma, alpha,
                  direction="positive", n_samples=10000, seed=0):
    """Largest location set jointly exceeding gamma with probability 1-alpha.

    `field_mean` is the posterior mean of the field under test (the IC map
    for engagement, the deviation map with gamma 0 for deviation regions);
    the covariance is the fitted joint posterior of component `ic` from
    `moments`.  Candidates are prefixes of the locations ordered by
    marginal exceedance probability, capped at the marginal excursion set;
    recording each sample's first prefix failure yields exact joint counts
    for every candidate size at once, and the largest feasible prefix is
    returned.  Direction "negative" tests values below -gamma.
    """
    if direction not in ("positive", "negative"):
        raise ValueError(f"unknown direction: {direction!r}")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples")
    field_mean = np.asarray(field_mean, dtype=np.float64)
    n_comp, n_loc = moments.d.shape
    if field_mean.shape != (n_loc,):
        raise ValueError("field_mean length does not match the posterior")
    if not 0 <= ic < n_comp:
        raise ValueError("component index out of range")

    sd = moments.d[ic] * np.sqrt(
        np.maximum(moments.omega_inv_blocks[:, ic, ic], 0.0))
    p_marginal = _marginal_exceedance(field_mean, sd, gamma, direction)
    order = np.argsort(-p_marginal, kind="stable")
    k_max = int(np.count_nonzero(p_marginal >= 1.0 - alpha))

    mask = np.zeros(n_loc, dtype=bool)
    if k_max == 0:
        return ExcursionResult(mask=mask, gamma=float(gamma),
                               alpha=float(alpha), direction=direction,
                               attained_joint_prob=1.0, n_samples=n_samples)

    head = order[:k_max]
    dev_scale = moments.d[ic][head]
    mean_head = field_mean[head]
    lo, hi = ic * n_loc, (ic + 1) * n_loc
    # depth histogram: how many samples first fail at each prefix length
    depth_counts = np.zeros(k_max + 1, dtype=np.int64)
    done = 0
    chunk_idx = 0
    while done < n_samples:
        m = min(_CHUNK, n_samples - done)
        rng = np.random.default_rng([seed, chunk_idx])
        z = rng.standard_normal((n_comp * n_loc, m))
        u = moments.factor.half_solve_t(z)[lo:hi][head]
        samples = mean_head[:, None] + dev_scale[:, None] * u
        exceed = samples > gamma if direction == "positive" \
            else samples < -gamma
        fails = ~exceed
        any_fail = fails.any(axis=0)
        depth = np.where(any_fail, fails.argmax(axis=0), k_max)
        depth_counts += np.bincount(depth, minlength=k_max + 1)
        done += m
        chunk_idx += 1

    # survival[k] = samples whose first k ordered locations all exceed
    survival = np.cumsum(depth_counts[::-1])[::-1]
    p_joint = survival[1:] / float(n_samples)  # index k-1 <-> prefix size k
    feasible = np.flatnonzero(p_joint >= 1.0 - alpha)
    k_hat = int(feasible[-1]) + 1 if feasible.size else 0
    boundary_p = p_joint[k_hat - 1] if k_hat else p_joint[0]
    mc_se = np.sqrt(boundary_p * (1.0 - boundary_p) / n_samples)
    if mc_se > alpha / 10.0:
        raise InsufficientSamples(
            f"joint probability SE {mc_se:.4f} exceeds {alpha / 10.0:.4f}; "
            "increase n_samples")
    mask[head[:k_hat]] = True
    attained = float(p_joint[k_hat - 1]) if k_hat else 1.0
    return ExcursionResult(mask=mask, gamma=float(gamma), alpha=float(alpha),
                           direction=direction, attained_joint_prob=attained,
                           n_samples=n_samples)


def ttest_engagement(fit, gamma, alpha=0.1, direction="positive"):
    """Per-location one-sided z-tests with Bonferroni control, per IC map.

    Returns an (L, V) boolean mask: locations whose posterior mean exceeds
    gamma (or sits below -gamma) by more than z_{1 - alpha/V} posterior
    SDs.  Zero-SD locations are decided by the mean alone.
    """
    if direction not in ("positive", "negative"):
        raise ValueError(f"unknown direction: {direction!r}")
    mean = np.asarray(fit.subject_ics, dtype=np.float64)
    sd = np.asarray(fit.marginal_sd, dtype=np.float64)
    n_loc = mean.shape[1]
    shifted = mean - gamma if direction == "positive" else -gamma - mean
    z_crit = norm.ppf(1.0 - alpha / n_loc)
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = shifted / sd
    stat = np.where(sd > 0, stat,
                    np.where(shifted > 0, np.inf, -np.inf))
    return stat > z_crit


def fc_matrix(mixing):
    """Pearson correlation of mixing-matrix columns (IC timecourses)."""
    mixing = np.asarray(mixing, dtype=np.float64)
    if mixing.ndim != 2 or mixing.shape[0] < 3:
        raise ValueError("need a timepoints-by-components matrix, T >= 3")
    centered = mixing - mixing.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    if np.any(norms == 0):
        raise ConstantColumn("constant timecourse has no correlation")
    c = (centered / norms).T @ (centered / norms)
    np.fill_diagonal(c, 1.0)
    return c
