"""Data preparation: centering, dual regression, nuisance removal, reduction.

The estimation model works on a low-dimensional projection of the centered
timeseries. This module provides the steps in order: two-way centering with
global intensity scaling, dual regression against a set of group maps,
data-driven selection and removal of nuisance components, and the SVD-based
dimension reduction that produces the reduced data used by the fitters.
"""

import warnings
from dataclasses import dataclass

import numpy as np


class DegenerateData(ValueError):
    pass


class RankDeficientMaps(ValueError):
    pass


class EigGap(ValueError):
    """Requested dimension does not separate from the noise floor."""


class NonConvergence(UserWarning):
    pass


@dataclass(frozen=True)
class CenterScaleStats:
    row_means: np.ndarray
    col_means: np.ndarray
    image_sd: float
    scaled: bool


@dataclass(frozen=True)
class ReducedData:
    """Projected data y = H Y with C = H H' and noise floor nu0_sq."""

    y: np.ndarray
    H: np.ndarray
    C: np.ndarray
    nu0_sq: float

    @property
    def n_components(self):
        return self.y.shape[0]

    @property
    def n_locations(self):
        return self.y.shape[1]


def center_scale(y):
    """Remove row (space) and column (time) means, divide by image SD.

    The image SD is the square root of the per-timepoint variance across
    locations, averaged over timepoints. A matrix that centers to exactly
    zero is returned unscaled with `scaled=False` in the stats.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 2 or y.shape[1] < 2:
        raise DegenerateData("need a T x V matrix with T, V >= 2")
    if not np.all(np.isfinite(y)):
        raise DegenerateData("data contains non-finite values")
    row_means = y.mean(axis=1)
    col_means = y.mean(axis=0)
    yc = y - row_means[:, None] - col_means[None, :] + y.mean()
    for _ in range(10):
        rm = yc.mean(axis=1)
        cm = yc.mean(axis=0)
        if np.abs(rm).max() <= 1e-12 and np.abs(cm).max() <= 1e-12:
            break
        yc = yc - rm[:, None] - cm[None, :]
    image_sd = float(np.sqrt((yc ** 2).mean(axis=1).mean()))
    # centering residue of an (additively) constant input is pure roundoff;
    # scaling by it would blow noise up to order one
    floor = 1e-12 * max(float(np.abs(y).max()), 1.0)
    if image_sd > floor:
        yc = yc / image_sd
        scaled = True
    else:
        yc = np.zeros_like(yc)
        scaled = False
    stats = CenterScaleStats(row_means=row_means, col_means=col_means,
                             image_sd=image_sd, scaled=scaled)
    return yc, stats


def dual_regression(yc, group_maps):
    """Least-squares timecourses from group maps, then least-squares maps.

    Stage 1 regresses each timepoint's image on the group maps; stage 2
    regresses each location's timeseries on the stage-1 timecourses.
    """
    yc = np.asarray(yc, dtype=np.float64)
    group_maps = np.asarray(group_maps, dtype=np.float64)
    if np.linalg.matrix_rank(group_maps) < group_maps.shape[0]:
        raise RankDeficientMaps("group maps are not full row rank")
    mixing = yc @ np.linalg.pinv(group_maps)
    subject_maps = np.linalg.pinv(mixing) @ yc
    return mixing, subject_maps


def estimate_nuisance_count(resid, max_k=None, penalty_weight=1.0):
    """Latent dimension of a residual matrix by penalized PPCA likelihood.

    Maximizes over k the profile log-likelihood of the Gaussian
    probabilistic-PCA model of the smaller-side covariance eigenvalues,
    minus penalty_weight * nparams(k) * ln(min(T, V)) / 2. Returns 0 for
    (near-)zero input.
    """
    resid = np.asarray(resid, dtype=np.float64)
    t_len, n_loc = resid.shape
    m = min(t_len, n_loc)
    n = max(t_len, n_loc)
    small = resid @ resid.T if t_len <= n_loc else resid.T @ resid
    evals = np.linalg.eigvalsh(small / n)[::-1]
    evals = np.maximum(evals, 0.0)
    total = evals.sum()
    if total <= 1e-300:
        return 0
    if max_k is None:
        max_k = min(m - 1, 30)
    max_k = min(max_k, m - 1)

    logn = np.log(m)
    best_k, best = 0, -np.inf
    csum_log = np.concatenate([[0.0], np.cumsum(np.log(np.maximum(evals, 1e-300)))])
    csum = np.concatenate([[0.0], np.cumsum(evals)])
    for k in range(max_k + 1):
        sigma2 = (total - csum[k]) / (m - k)
        if sigma2 <= 0:
            break
        ll = -0.5 * n * (csum_log[k] + (m - k) * np.log(sigma2))
        nparams = m * k - k * (k + 1) / 2 + k + 1
        score = ll - penalty_weight * nparams * logn / 2.0
        if score > best:
            best, best_k = score, k
    return best_k


def infomax_ica(yc, k, rng_seed=None, max_sweeps=500, tol=1e-6):
    """Spatial ICA by natural-gradient infomax with a logistic nonlinearity.

    Whitens to k dimensions, then iterates over shuffled blocks of
    locations until the relative unmixing update falls below `tol`. A
    NonConvergence warning is emitted if the sweep limit is hit; the last
    iterate is still returned.
    """
    yc = np.asarray(yc, dtype=np.float64)
    t_len, n_loc = yc.shape
    if k < 1 or k > min(t_len, n_loc):
        raise ValueError(f"k must be in [1, min(T, V)], got {k}")
    rng = np.random.default_rng(rng_seed)

    # whiten across the time dimension so sources live over locations
    cov = yc @ yc.T / n_loc
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    d = np.maximum(evals[order], 1e-12)
    wh = (evecs[:, order] / np.sqrt(d)).T  # k x T
    z = wh @ yc  # k x V, identity spatial covariance

    b = np.eye(k)
    block = max(8, int(np.floor(np.sqrt(n_loc / 3.0))))
    lrate = 0.01 / np.log(k + 2.0)
    eye = np.eye(k)
    converged = False
    for _ in range(max_sweeps):
        perm = rng.permutation(n_loc)
        b_prev = b.copy()
        for start in range(0, n_loc, block):
            idx = perm[start:start + block]
            u = b @ z[:, idx]
            g = 1.0 / (1.0 + np.exp(-u))
            grad = eye + ((1.0 - 2.0 * g) @ u.T) / idx.size
            b = b + lrate * grad @ b
        if not np.all(np.isfinite(b)) or np.abs(b).max() > 1e8:
            # diverged: restart from identity with a smaller step
            b = np.eye(k)
            lrate *= 0.5
            continue
        delta = np.linalg.norm(b - b_prev) / max(np.linalg.norm(b_prev), 1e-30)
        if delta < tol:
            converged = True
            break
        lrate *= 0.97  # stochastic updates jitter forever at fixed step size
    if not converged:
        warnings.warn(NonConvergence(
            f"infomax did not converge in {max_sweeps} sweeps"))
    sources = b @ z
    mixing = np.linalg.pinv(b @ wh)
    return sources, mixing


def remove_nuisance(yc, template, iterations=1, forced_count=None,
                    rng_seed=None):
    """Estimate and subtract structured noise not explained by the template.

    Each iteration: fit the template signal by dual regression and remove
    it, select the residual's latent dimension (or use `forced_count`),
    run infomax on the residual, and subtract the nuisance reconstruction
    from the working data. iterations=0 returns the input unchanged.
    """
    yc = np.asarray(yc, dtype=np.float64)
    for it in range(iterations):
        mixing, maps = dual_regression(yc, template.mean)
        resid = yc - mixing @ maps
        k = forced_count if forced_count is not None else \
            estimate_nuisance_count(resid)
        if k < 1:
            break
        n_maps, n_mix = infomax_ica(resid, k, rng_seed=[rng_seed, it]
                                    if rng_seed is not None else None)
        yc = yc - n_mix @ n_maps
    return yc


def dimension_reduce(yc, n_components):
    """Project T x V data to L x V with whitened signal subspace.

    Eigendecomposes the timepoint covariance (computed on whichever side
    of the data is smaller), takes the top L eigenpairs, estimates the
    noise floor nu0_sq as the mean of the remaining T - L eigenvalues,
    and whitens: H = diag((d^2 - nu0_sq)^-1/2) U'.
    """
    yc = np.asarray(yc, dtype=np.float64)
    t_len, n_loc = yc.shape
    if t_len <= n_components:
        raise ValueError("need T > L for dimension reduction")

    if t_len <= n_loc:
        cov = yc @ yc.T / n_loc
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][:n_components]
        d2 = evals[order]
        u = evecs[:, order]
    else:
        gram = yc.T @ yc / n_loc
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1][:n_components]
        d2 = evals[order]
        u = yc @ evecs[:, order]
        u /= np.linalg.norm(u, axis=0)
    total = float((yc ** 2).sum()) / n_loc
    nu0_sq = (total - float(d2.sum())) / (t_len - n_components)
    if nu0_sq <= 0 or d2[-1] <= nu0_sq:
        raise EigGap(
            f"eigenvalue {d2[-1]:.4g} does not exceed noise floor "
            f"{nu0_sq:.4g}; reduce the component count")
    h = (u / np.sqrt(d2 - nu0_sq)).T
    return ReducedData(y=h @ yc, H=h, C=h @ h.T, nu0_sq=float(nu0_sq))
