"""EM engines for template-based IC estimation.

Two fitters share one model: the observed reduced data at location v is
y(v) = M s(v) + noise, with a Gaussian prior on s centered at the template
mean whose deviations are scaled by the template SD. The spatial fitter
(fit_stica) gives the deviations a Matern-field prior over the mesh and
estimates its smoothness; the benchmark fitter (fit_tica) uses a spatially
independent prior. Both alternate posterior-moment computation with exact
M updates; the spatial smoothness is maximized numerically. SQUAREM
extrapolation accelerates the fixed-point iteration.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import mesh as mesh_mod
from .mesh import NonPositiveKappa, PrecisionBuilder
from .sparsela import (CholFactor, DimensionMismatch, NotPositiveDefinite,
                       PartialInversePlan, SparseSym, cholesky,
                       fill_reducing_ordering)


class SingularSecondMoment(ValueError):
    pass


class BoundaryMaximum(UserWarning):
    pass


class MaxIterReached(UserWarning):
    pass


@dataclass(frozen=True)
class ModelParams:
    mixing: np.ndarray
    kappas: np.ndarray
    nu0_sq: float
    C: np.ndarray


@dataclass(frozen=True)
class PosteriorMoments:
    """E-step outputs, everything in IC-major ordering (component blocks
    of length V stacked)."""

    mu: np.ndarray
    m: np.ndarray
    omega_inv_m: np.ndarray
    omega_inv_blocks: np.ndarray   # (V, L, L) location-diagonal blocks
    rinv_pattern_values: np.ndarray  # (L, nnz(R^-1)) of the inverse per IC
    d: np.ndarray                  # (L, V) floored template SDs
    kappas: np.ndarray
    factor: CholFactor


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    subject_ics: np.ndarray
    subject_effects: np.ndarray
    marginal_sd: np.ndarray
    trace: np.ndarray
    iterations: int
    wall_seconds: float
    converged: bool
    moments: PosteriorMoments = field(repr=False, default=None)


def floored_sd(template_variance, floor_scale=1e-3):
    """Template SDs with small values floored per component.

    The posterior linear system divides by these SDs; the floor is
    floor_scale times the median positive SD of the component (absolute
    fallback if a whole map is zero).
    """
    sd = np.sqrt(np.asarray(template_variance, dtype=np.float64))
    out = np.empty_like(sd)
    for l in range(sd.shape[0]):
        pos = sd[l][sd[l] > 0]
        floor = floor_scale * np.median(pos) if pos.size else floor_scale
        out[l] = np.maximum(sd[l], floor)
    return out


class OmegaTemplate:
    """Fixed pattern of the VL x VL posterior precision.

    Component diagonal blocks carry the data-precision pattern; the only
    cross-component coupling is diagonal (the data term acts per
    location). The pattern, its sorted order, the symbolic factorization,
    the selected-inverse plan, and the gather maps for the per-location
    blocks are all computed once and reused every iteration.

    The factorization order is built, not guessed: an ordering of the
    shared per-component pattern (perm_r, defaulting to plain minimum
    degree), lifted to interleaved component blocks per location.
    Generic minimum degree on the full coupled graph interleaves the
    layers and the fill explodes; the lifted ordering keeps it at the
    single-pattern fill times L^2.
    """

    def __init__(self, r_rows, r_cols, n_data, n_components, perm_r=None):
        v, l = n_data, n_components
        self.n_data = v
        self.n_components = l
        self.r_nnz = nr = r_rows.size
        self.r_diag_pos = np.flatnonzero(r_rows == r_cols)
        if self.r_diag_pos.size != v:
            raise ValueError("data precision pattern must include the diagonal")
        if perm_r is None:
            perm_r = fill_reducing_ordering(
                SparseSym(v, r_rows, r_cols, np.ones(nr)))
        self._perm = (perm_r[:, None] + np.arange(l) * v).ravel()

        rows = [r_rows + k * v for k in range(l)]
        cols = [r_cols + k * v for k in range(l)]
        for a in range(l):
            for b in range(a):
                rows.append(np.arange(v, dtype=np.int64) + a * v)
                cols.append(np.arange(v, dtype=np.int64) + b * v)
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        order = np.lexsort((cols, rows))
        self.rows = rows[order]
        self.cols = cols[order]
        self._assembly_to_sorted = np.argsort(order, kind="stable")
        self.nnz = self.rows.size

        # gather map for the (V, L, L) location-diagonal blocks
        a2s = self._assembly_to_sorted
        gather = np.empty((v, l, l), dtype=np.int64)
        for a in range(l):
            gather[:, a, a] = a2s[a * nr + self.r_diag_pos]
        base = l * nr
        for a in range(l):
            for b in range(a):
                pos = a2s[base:base + v]
                gather[:, a, b] = pos
                gather[:, b, a] = pos
                base += v
        self._block_gather = gather
        self._block_slices = [a2s[k * nr:(k + 1) * nr] for k in range(l)]
        self.symbolic = None
        self.plan = None

    def assemble(self, rinv_list, d, g_over_nu):
        """Values for the pattern: blockdiag(R^-1) + data term.

        g_over_nu is M' C^-1 M / nu0^2; its (a, b) entry scales the
        products d_a(v) d_b(v) on the location diagonal.
        """
        v, l, nr = self.n_data, self.n_components, self.r_nnz
        vals = np.empty(self.nnz)
        for k in range(l):
            block = rinv_list[k].vals.copy()
            block[self.r_diag_pos] += g_over_nu[k, k] * d[k] * d[k]
            vals[k * nr:(k + 1) * nr] = block
        base = l * nr
        for a in range(l):
            for b in range(a):
                vals[base:base + v] = g_over_nu[a, b] * d[a] * d[b]
                base += v
        sorted_vals = np.empty_like(vals)
        sorted_vals[self._assembly_to_sorted] = vals
        return SparseSym(v * l, self.rows, self.cols, sorted_vals)

    def factorize(self, omega):
        f = cholesky(omega, symbolic=self.symbolic, perm=self._perm)
        self.symbolic = f.symbolic
        return f

    def selected_inverse(self, factor):
        """Inverse entries on the full pattern, plus the views the M- and
        kappa-updates need: (V, L, L) blocks and per-component
        data-precision-pattern values."""
        if self.plan is None:
            self.plan = PartialInversePlan(self.symbolic, self.rows, self.cols)
        zvals = self.plan.execute(factor)
        blocks = zvals[self._block_gather]
        per_ic = np.stack([zvals[s] for s in self._block_slices])
        return blocks, per_ic


def build_omega(rinv_list, d, mixing, c_mat, nu0_sq):
    """Posterior precision of the SD-scaled deviations, order V*L.

    Component-major ordering; block (a, b) is [a = b] R_a^-1 +
    ([M'C^-1 M]_ab / nu0^2) D_a D_b, the cross blocks being diagonal.
    """
    l = len(rinv_list)
    v = rinv_list[0].order
    d = np.asarray(d, dtype=np.float64)
    g_over_nu = mixing.T @ np.linalg.solve(c_mat, mixing) / nu0_sq
    tpl = OmegaTemplate(rinv_list[0].rows, rinv_list[0].cols, v, l)
    for k in range(1, l):
        if (rinv_list[k].rows.shape != rinv_list[0].rows.shape
                or np.any(rinv_list[k].rows != rinv_list[0].rows)):
            raise ValueError("data precisions must share one pattern")
    return tpl.assemble(rinv_list, d, g_over_nu)


def _data_terms(reduced, mixing):
    """b = M'C^-1 y / nu0^2 (L x V) and g = M'C^-1 M / nu0^2 (L x L)."""
    ci_m = np.linalg.solve(reduced.C, mixing)
    b = ci_m.T @ reduced.y / reduced.nu0_sq
    g = mixing.T @ ci_m / reduced.nu0_sq
    return b, g


def e_step(params, reduced, template, rinv_list, d=None, omega_template=None):
    """Posterior moments of the component maps at the current parameters.

    Solves one sparse system for the posterior mean and runs a selected
    inverse for exactly the entries the M and smoothness updates consume:
    the location-diagonal L x L blocks and the data-precision pattern of
    each component's diagonal block.
    """
    l, v = template.mean.shape
    if d is None:
        d = floored_sd(template.variance)
    b, g = _data_terms(reduced, params.mixing)
    if omega_template is None:
        omega_template = OmegaTemplate(rinv_list[0].rows, rinv_list[0].cols,
                                       v, l)
    omega = omega_template.assemble(rinv_list, d, g)
    factor = omega_template.factorize(omega)

    u = template.mean / d  # D^-1 s0, safe: d is floored
    m = np.empty(l * v)
    for k in range(l):
        m[k * v:(k + 1) * v] = d[k] * b[k] + rinv_list[k].matvec(u[k])
    omega_inv_m = factor.solve(m)
    mu = d.ravel() * omega_inv_m

    blocks, per_ic = omega_template.selected_inverse(factor)
    return PosteriorMoments(mu=mu, m=m, omega_inv_m=omega_inv_m,
                            omega_inv_blocks=blocks,
                            rinv_pattern_values=per_ic, d=d,
                            kappas=np.asarray(params.kappas, dtype=np.float64),
                            factor=factor)


def update_M(moments, reduced):
    """Exact M maximizer: (sum_v y(v) t(v)') (sum_v T(v,v))^-1.

    t(v) is the posterior mean at location v and T(v,v) adds the
    posterior covariance block to t(v) t(v)'.
    """
    l, v = moments.d.shape
    t = moments.mu.reshape(l, v)
    dv = moments.d.T  # (V, L)
    cov = moments.omega_inv_blocks * dv[:, :, None] * dv[:, None, :]
    t_sum = cov.sum(axis=0) + t @ t.T
    yt = reduced.y @ t.T
    try:
        out = np.linalg.solve(t_sum.T, yt.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularSecondMoment(str(exc)) from None
    if not np.all(np.isfinite(out)):
        raise SingularSecondMoment("second-moment matrix is numerically singular")
    return out


def _trace_against_pattern(rinv, sym_vals):
    """Tr(R^-1 B) where B's values on the (lower, canonical) pattern of
    R^-1 are given; off-diagonal entries count twice."""
    prod = rinv.vals * sym_vals
    off = prod.sum() - prod[rinv.rows == rinv.cols].sum()
    return prod.sum() + off


def kappa_objective(kappa, ic, moments, template, builder):
    """Expected complete-data log-likelihood terms that involve kappa.

    log det R^-1 minus the traces of R^-1 against the posterior second
    moment (pattern part plus the rank-one mean part) plus the
    template-mean cross term.
    """
    rinv, logdet_rinv = builder.data_precision(kappa, with_logdet=True)
    return _kappa_objective_given(rinv, logdet_rinv, ic, moments, template)


def _kappa_objective_given(rinv, logdet_rinv, ic, moments, template):
    v = moments.d.shape[1]
    sl = slice(ic * v, (ic + 1) * v)
    w = moments.omega_inv_m[sl]
    u = template.mean[ic] / moments.d[ic]
    vhat = 2.0 * w - u
    tr_omega = _trace_against_pattern(rinv, moments.rinv_pattern_values[ic])
    tr_w = _trace_against_pattern(rinv, w[rinv.rows] * w[rinv.cols])
    cross = float(u @ rinv.matvec(vhat))
    return logdet_rinv - tr_omega - tr_w + cross


_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


def golden_max(fun, lo, hi, tol):
    """Golden-section maximizer on [lo, hi]; returns (x, f(x))."""
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = fun(c), fun(d)
    while (b - a) > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = fun(d)
    if fc > fd:
        return c, fc
    return d, fd


def _search_kappa(objective, ln_center, half_width=3.0, tol=1e-4):
    lo, hi = ln_center - half_width, ln_center + half_width
    ln_best, f_best = golden_max(objective, lo, hi, tol)
    if ln_best - lo < 10 * tol or hi - ln_best < 10 * tol:
        warnings.warn(BoundaryMaximum(
            f"smoothness optimum at search-bracket edge (ln kappa "
            f"{ln_best:.3f} in [{lo:.3f}, {hi:.3f}])"))
    return ln_best, f_best


def update_kappa(moments, template, builder, mode="common"):
    """Maximize the smoothness objective over ln kappa.

    Golden-section on [ln kappa_cur - 3, ln kappa_cur + 3] to 1e-4;
    the posterior moments stay fixed (only R(kappa) is refactorized).
    The current kappa is kept whenever the search does not improve on it.
    """
    l = moments.d.shape[0]
    kappas = moments.kappas
    if mode == "common":
        def objective(ln_k):
            k = float(np.exp(ln_k))
            rinv, ld = builder.data_precision(k, with_logdet=True)
            return sum(_kappa_objective_given(rinv, ld, ic, moments, template)
                       for ic in range(l))
        ln_cur = float(np.log(kappas[0]))
        ln_new, f_new = _search_kappa(objective, ln_cur)
        if objective(ln_cur) >= f_new:
            ln_new = ln_cur
        return np.full(l, np.exp(ln_new))
    if mode != "per-ic":
        raise ValueError(f"unknown smoothness mode {mode!r}")
    out = np.empty(l)
    for ic in range(l):
        def objective(ln_k, ic=ic):
            return kappa_objective(float(np.exp(ln_k)), ic, moments, template,
                                   builder)
        ln_cur = float(np.log(kappas[ic]))
        ln_new, f_new = _search_kappa(objective, ln_cur)
        if objective(ln_cur) >= f_new:
            ln_new = ln_cur
        out[ic] = np.exp(ln_new)
    return out


def init_kappa_objective(kappa, delta_hat, d, builder, sigma_sq,
                         _cache=None):
    """Marginal log-likelihood of a rough deviation estimate at one kappa.

    Models delta_hat as true deviation plus N(0, sigma_sq I) noise:
    -log|K| + log|R^-1| - V log s2 - delta'delta/s2 + quadratic in
    K^-1 D delta / s2^2, with K = R^-1 + D^2/s2 (same pattern as R^-1, so
    one symbolic analysis serves every kappa). Accepts (V,) or (L, V)
    input; stacked input sums the per-component terms with a shared R.
    """
    delta_hat = np.atleast_2d(np.asarray(delta_hat, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    l, v = delta_hat.shape
    if sigma_sq <= 0:
        raise ValueError("sigma_sq must be positive")
    if _cache is None:
        _cache = {}
    rinv, logdet_rinv = builder.data_precision(kappa, with_logdet=True)
    total = l * logdet_rinv - l * v * np.log(sigma_sq)
    diag_pos = rinv.rows == rinv.cols
    for ic in range(l):
        kvals = rinv.vals.copy()
        kvals[diag_pos] += d[ic] ** 2 / sigma_sq
        kf = cholesky(rinv.with_values(kvals), symbolic=_cache.get("sym"),
                      perm=builder.r_ordering())
        _cache["sym"] = kf.symbolic
        dd = d[ic] * delta_hat[ic]
        total -= kf.logdet()
        total -= delta_hat[ic] @ delta_hat[ic] / sigma_sq
        total += dd @ kf.solve(dd) / sigma_sq ** 2
    return total


def init_kappa(delta_hat, d, builder, sigma_sq, bracket=(0.02, 20.0),
               tol=1e-4):
    """Smoothness initializer: maximize init_kappa_objective over ln kappa."""
    cache = {}

    def objective(ln_k):
        return init_kappa_objective(float(np.exp(ln_k)), delta_hat, d,
                                    builder, sigma_sq, _cache=cache)

    lo, hi = np.log(bracket[0]), np.log(bracket[1])
    ln_best, _ = golden_max(objective, lo, hi, tol)
    if ln_best - lo < 10 * tol or hi - ln_best < 10 * tol:
        warnings.warn(BoundaryMaximum(
            "initializer optimum at search-bracket edge"))
    return float(np.exp(ln_best))


def _squarem_extrapolate(theta0, theta1, theta2):
    r = theta1 - theta0
    w = theta2 - theta1 - r
    nw = np.linalg.norm(w)
    if nw == 0:
        return theta2
    alpha = min(-np.linalg.norm(r) / nw, -1.0)
    return theta0 - 2.0 * alpha * r + alpha * alpha * w


def _finish(params, reduced, template, rinv_list, d, omega_template, trace,
            n_evals, t_start, converged):
    moments = e_step(params, reduced, template, rinv_list, d=d,
                     omega_template=omega_template)
    l, v = template.mean.shape
    mu = moments.mu.reshape(l, v)
    effects = mu - template.mean
    ics = template.mean + effects
    diag_var = moments.omega_inv_blocks[:, np.arange(l), np.arange(l)].T
    marginal_sd = d * np.sqrt(np.maximum(diag_var, 0.0))
    return FitResult(params=params, subject_ics=ics, subject_effects=effects,
                     marginal_sd=marginal_sd,
                     trace=np.asarray(trace), iterations=n_evals,
                     wall_seconds=time.monotonic() - t_start,
                     converged=converged, moments=moments)


def fit_stica(reduced, template, mesh, mode="common", tol=1e-3, max_iter=100,
              squarem=True, d_floor_scale=1e-3, builder=None):
    """Fit the spatial model by EM with SQUAREM acceleration.

    The mixing matrix starts at the reduced-space regression on the
    template means and the smoothness at the marginal-likelihood
    initializer; iterations stop when the parameter step (vec M and ln
    kappa jointly) drops below tol. max_iter counts fixed-point map
    evaluations. Returns the best iterate flagged unconverged (and warns)
    when the limit is hit.
    """
    t_start = time.monotonic()
    template.validate()
    if builder is None:
        builder = PrecisionBuilder(mesh)
    l, v = template.mean.shape
    if builder.n_data != v:
        raise DimensionMismatch("mesh data locations != template size")
    d = floored_sd(template.variance, d_floor_scale)

    # starting values: regression of reduced data on the template means,
    # then the marginal-likelihood smoothness initializer
    s0_pinv = np.linalg.pinv(template.mean)
    m0 = reduced.y @ s0_pinv
    m0_pinv = np.linalg.pinv(m0)
    delta0 = m0_pinv @ reduced.y - template.mean
    noise_var = np.diag(m0_pinv @ (reduced.nu0_sq * reduced.C) @ m0_pinv.T)
    if mode == "common":
        kappa0 = init_kappa(delta0, d, builder, float(np.mean(noise_var)))
        kappas0 = np.full(l, kappa0)
        n_kappa = 1
    elif mode == "per-ic":
        kappas0 = np.array([
            init_kappa(delta0[ic], d[ic], builder, float(noise_var[ic]))
            for ic in range(l)])
        n_kappa = l
    else:
        raise ValueError(f"unknown smoothness mode {mode!r}")

    omega_template = OmegaTemplate(builder.r_rows, builder.r_cols, v, l,
                                   perm_r=builder.r_ordering())
    rinv_cache = {}

    def rinvs(kappas):
        out = []
        for k in kappas:
            key = float(k)
            if key not in rinv_cache:
                rinv_cache[key] = builder.data_precision(key)
                if len(rinv_cache) > 64:
                    rinv_cache.pop(next(iter(rinv_cache)))
            out.append(rinv_cache[key])
        return out

    def pack(mixing, kappas):
        return np.concatenate([mixing.ravel(), np.log(kappas[:n_kappa])])

    def unpack(theta):
        ln_k = theta[l * l:]
        kappas = np.exp(np.repeat(ln_k, l) if n_kappa == 1 else ln_k)
        return theta[:l * l].reshape(l, l), kappas

    def f_map(theta):
        mixing, kappas = unpack(theta)
        params = ModelParams(mixing=mixing, kappas=kappas,
                             nu0_sq=reduced.nu0_sq, C=reduced.C)
        moments = e_step(params, reduced, template, rinvs(kappas), d=d,
                         omega_template=omega_template)
        new_m = update_M(moments, reduced)
        new_k = update_kappa(moments, template, builder, mode=mode)
        return pack(new_m, new_k)

    theta = pack(m0, kappas0)
    trace = []
    n_evals = 0
    converged = False
    while n_evals < max_iter:
        theta1 = f_map(theta)
        n_evals += 1
        trace.append(np.linalg.norm(theta1 - theta))
        if trace[-1] < tol:
            theta = theta1
            converged = True
            break
        if not squarem or n_evals >= max_iter:
            theta = theta1
            continue
        theta2 = f_map(theta1)
        n_evals += 1
        trace.append(np.linalg.norm(theta2 - theta1))
        if trace[-1] < tol:
            theta = theta2
            converged = True
            break
        theta_x = _squarem_extrapolate(theta, theta1, theta2)
        if n_evals >= max_iter:
            theta = theta2
            continue
        try:
            theta_next = f_map(theta_x)
            n_evals += 1
        except (NotPositiveDefinite, NonPositiveKappa, FloatingPointError):
            theta = theta2
            continue
        trace.append(np.linalg.norm(theta_next - theta_x))
        if trace[-1] < tol:
            theta = theta_next
            converged = True
            break
        theta = theta_next
    if not converged:
        warnings.warn(MaxIterReached(
            f"EM stopped after {n_evals} map evaluations above tolerance"))

    mixing, kappas = unpack(theta)
    params = ModelParams(mixing=mixing, kappas=kappas,
                         nu0_sq=reduced.nu0_sq, C=reduced.C)
    return _finish(params, reduced, template, rinvs(kappas), d,
                   omega_template, trace, n_evals, t_start, converged)


# ---------------------------------------------------------------------------
# spatially independent benchmark


def _tica_moments(mixing, reduced, template, d):
    """Per-location conjugate-Gaussian moments under the independent prior.

    Returns (mu (L,V), cov (V, L, L) of s at each location).
    """
    l, v = template.mean.shape
    b, g = _data_terms(reduced, mixing)
    dv = d.T  # (V, L)
    omega = np.broadcast_to(np.eye(l), (v, l, l)) + \
        g[None, :, :] * dv[:, :, None] * dv[:, None, :]
    # safe form: mu = s0 + D Omega^-1 D (b - g s0), no division by D
    resid = b - g @ template.mean  # (L, V)
    rhs = (dv * resid.T)[:, :, None]
    sol = np.linalg.solve(omega, rhs)[:, :, 0]
    mu = template.mean + (dv * sol).T
    cov = np.linalg.inv(omega) * dv[:, :, None] * dv[:, None, :]
    return mu, cov


def fit_tica(reduced, template, tol=1e-3, max_iter=100, squarem=True,
             d_floor_scale=1e-3):
    """EM fit with a spatially independent prior on the deviations.

    Identical model without the spatial coupling, so the E-step
    factorizes into V independent L x L solves and there is no
    smoothness parameter.
    """
    t_start = time.monotonic()
    template.validate()
    l, v = template.mean.shape
    d = floored_sd(template.variance, d_floor_scale)
    m0 = reduced.y @ np.linalg.pinv(template.mean)

    def f_map(theta):
        mixing = theta.reshape(l, l)
        mu, cov = _tica_moments(mixing, reduced, template, d)
        t_sum = cov.sum(axis=0) + mu @ mu.T
        yt = reduced.y @ mu.T
        try:
            new_m = np.linalg.solve(t_sum.T, yt.T).T
        except np.linalg.LinAlgError as exc:
            raise SingularSecondMoment(str(exc)) from None
        return new_m.ravel()

    theta = m0.ravel()
    trace = []
    n_evals = 0
    converged = False
    while n_evals < max_iter:
        theta1 = f_map(theta)
        n_evals += 1
        trace.append(np.linalg.norm(theta1 - theta))
        if trace[-1] < tol:
            theta = theta1
            converged = True
            break
        if not squarem or n_evals >= max_iter:
            theta = theta1
            continue
        theta2 = f_map(theta1)
        n_evals += 1
        trace.append(np.linalg.norm(theta2 - theta1))
        if trace[-1] < tol:
            theta = theta2
            converged = True
            break
        theta_x = _squarem_extrapolate(theta, theta1, theta2)
        try:
            theta_next = f_map(theta_x)
            n_evals += 1
        except SingularSecondMoment:
            theta = theta2
            continue
        trace.append(np.linalg.norm(theta_next - theta_x))
        if trace[-1] < tol:
            theta = theta_next
            converged = True
            break
        theta = theta_next
    if not converged:
        warnings.warn(MaxIterReached(
            f"EM stopped after {n_evals} map evaluations above tolerance"))

    mixing = theta.reshape(l, l)
    mu, cov = _tica_moments(mixing, reduced, template, d)
    effects = mu - template.mean
    ics = template.mean + effects
    marginal_sd = np.sqrt(np.maximum(
        cov[:, np.arange(l), np.arange(l)].T, 0.0))
    params = ModelParams(mixing=mixing, kappas=np.array([]),
                         nu0_sq=reduced.nu0_sq, C=reduced.C)
    return FitResult(params=params, subject_ics=ics, subject_effects=effects,
                     marginal_sd=marginal_sd, trace=np.asarray(trace),
                     iterations=n_evals,
                     wall_seconds=time.monotonic() - t_start,
                     converged=converged)
