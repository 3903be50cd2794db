"""Release checks: every public claim the package makes, gated end to end.

Each test here is one gate. The fast ones cross-check the sparse engines
against dense textbook implementations on random instances; the reduced
scale study runs the full pipeline at production settings with five
subjects and asserts the headline comparisons between the spatial fit,
the template-only fit, and dual regression.
"""

import pathlib
import warnings

import numpy as np
import pytest
from scipy.stats import norm

import oracles
from spatica import dataio, pipeline
from spatica import sparsela as sla
from spatica.em import (BoundaryMaximum, MaxIterReached, ModelParams,
                        PosteriorMoments, e_step, fit_tica, floored_sd,
                        kappa_objective, update_kappa, update_M)
from spatica.inference import excursion_set, ttest_engagement
from spatica.mesh import PrecisionBuilder, assemble_fem, grid_mesh, \
    spde_precision
from spatica.preprocess import ReducedData
from spatica.sparsela import SparseSym, cholesky
from spatica.template import (SubjectTruth, Template,
                              default_timecourse_pool, gaussian_peak_map,
                              simulate_timeseries)


def _rel_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(1e-30, float(np.abs(want).max()))
    return float(np.abs(got - want).max()) / scale


def _random_instance(builder, n_comp, rng):
    v = builder.n_data
    kappas = np.exp(rng.uniform(-0.7, 0.7, n_comp))
    nu0_sq = rng.uniform(0.5, 1.5)
    mixing = np.eye(n_comp) + 0.3 * rng.standard_normal((n_comp, n_comp))
    a = rng.standard_normal((n_comp, 2 * n_comp))
    c_mat = a @ a.T / (2 * n_comp) + np.eye(n_comp)
    template = Template(mean=2.0 * rng.standard_normal((n_comp, v)),
                        variance=0.3 + rng.random((n_comp, v)))
    y = 3.0 * rng.standard_normal((n_comp, v))
    reduced = ReducedData(y=y, H=np.eye(n_comp), C=c_mat, nu0_sq=nu0_sq)
    params = ModelParams(mixing=mixing, kappas=kappas, nu0_sq=nu0_sq,
                         C=c_mat)
    rinv_list = [builder.data_precision(float(k)) for k in kappas]
    return params, reduced, template, rinv_list


# grids whose interior sizes span 6..30 data locations
_GRIDS = [(2, 3), (2, 4), (3, 3), (2, 5), (3, 4), (2, 7), (3, 5), (4, 4),
          (2, 9), (4, 5), (3, 7), (4, 6), (5, 5), (3, 9), (4, 7), (5, 6)]


def test_em_iteration_matches_dense_reference():
    """One full EM iteration agrees with a dense implementation to 1e-8.

    25 random instances, 6..30 locations, 1..3 components: posterior mean,
    the selected inverse entries, the mixing update, and the smoothness
    objective at three trial values per component.
    """
    tol = 1e-8
    rng = np.random.default_rng(20240501)
    builders = {}
    for _ in range(25):
        grid = _GRIDS[rng.integers(len(_GRIDS))]
        n_comp = int(rng.integers(1, 4))
        if grid not in builders:
            builders[grid] = PrecisionBuilder(grid_mesh(*grid))
        builder = builders[grid]
        v = builder.n_data
        params, reduced, template, rinv_list = _random_instance(
            builder, n_comp, rng)
        d = floored_sd(template.variance)

        moments = e_step(params, reduced, template, rinv_list)
        post = oracles.dense_posterior(
            [r.to_dense() for r in rinv_list], d, params.mixing, params.C,
            params.nu0_sq, reduced.y, template.mean)

        assert _rel_err(moments.mu, post["mu"]) <= tol
        blocks = np.stack([
            post["omega_inv"][np.ix_(loc + v * np.arange(n_comp),
                                     loc + v * np.arange(n_comp))]
            for loc in np.arange(v)[:, None]])
        assert _rel_err(moments.omega_inv_blocks, blocks) <= tol
        for ic in range(n_comp):
            r = rinv_list[ic]
            want = post["omega_inv"][ic * v + r.rows, ic * v + r.cols]
            assert _rel_err(moments.rinv_pattern_values[ic], want) <= tol

        m_hat = update_M(moments, reduced)
        m_ref = oracles.dense_update_m(reduced.y, post, v, n_comp)
        assert _rel_err(m_hat, m_ref) <= tol

        w_full = post["omega_inv"] @ post["m"]
        for kappa in (0.4, 1.1, 2.7):
            rinv_d = builder.data_precision(kappa).to_dense()
            for ic in range(n_comp):
                idx = slice(ic * v, (ic + 1) * v)
                ref = oracles.dense_kappa_objective(
                    rinv_d, post["omega_inv"][idx, idx], w_full[idx],
                    template.mean[ic] / d[ic])
                got = kappa_objective(kappa, ic, moments, template, builder)
                assert abs(got - ref) <= tol * max(1.0, abs(ref))


def test_em_loglik_monotone_without_acceleration():
    """Observed-data log-likelihood never decreases over 20 plain steps.

    10 random tiny instances, data drawn from the generative model itself;
    the dense marginal likelihood is evaluated after every update with
    slack -1e-8 relative.
    """
    builder = PrecisionBuilder(grid_mesh(2, 3))
    v = builder.n_data
    rng = np.random.default_rng(20240502)
    for trial in range(10):
        n_comp = 1 + trial % 2
        params, _, template, rinv_list = _random_instance(
            builder, n_comp, rng)
        d = floored_sd(template.variance)
        s = np.empty((n_comp, v))
        for ic in range(n_comp):
            f = cholesky(rinv_list[ic])
            s[ic] = template.mean[ic] + d[ic] * f.half_solve_t(
                rng.standard_normal(v))
        ch = np.linalg.cholesky(params.C)
        y = params.mixing @ s + np.sqrt(params.nu0_sq) * (
            ch @ rng.standard_normal((n_comp, v)))
        reduced = ReducedData(y=y, H=np.eye(n_comp), C=params.C,
                              nu0_sq=params.nu0_sq)

        def loglik(p, rlist):
            return oracles.observed_loglik(
                [r.to_dense() for r in rlist], d, p.mixing, p.C, p.nu0_sq,
                reduced.y, template.mean)

        ll = loglik(params, rinv_list)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryMaximum)
            for _ in range(20):
                moments = e_step(params, reduced, template, rinv_list)
                mixing = update_M(moments, reduced)
                kappas = update_kappa(moments, template, builder,
                                      mode="common")
                params = ModelParams(mixing=mixing, kappas=kappas,
                                     nu0_sq=params.nu0_sq, C=params.C)
                rinv_list = [builder.data_precision(float(k))
                             for k in kappas]
                ll_new = loglik(params, rinv_list)
                assert ll_new >= ll - 1e-8 * max(1.0, abs(ll))
                ll = ll_new


def test_selected_inverse_matches_dense_on_pattern():
    """Takahashi recursion vs dense inverse, 20 random SPD up to order 200."""
    rng = np.random.default_rng(20240503)
    for trial in range(20):
        n = int(rng.integers(20, 201))
        density = rng.uniform(0.02, 0.08)
        mask = np.tril(rng.random((n, n)) < density, -1)
        a = np.zeros((n, n))
        a[mask] = rng.standard_normal(int(mask.sum()))
        a = a + a.T
        a[np.diag_indices(n)] = np.abs(a).sum(axis=1) + rng.uniform(
            0.5, 2.0, n)
        s = SparseSym.from_dense(a)
        f = cholesky(s)
        z = sla.partial_inverse(f, s.rows, s.cols)
        inv = np.linalg.inv(a)
        assert np.abs(z.vals - inv[z.rows, z.cols]).max() <= 1e-10


def test_spatial_data_precision_matches_dense_reference():
    """Schur complement onto the data sites equals the dense evaluation.

    The reference inverts the dense prior covariance restricted to the
    data rows, with the prior precision itself assembled densely from the
    mass and stiffness matrices. Meshes up to 60 vertices.
    """
    c1 = 1.0 / (4.0 * np.pi)
    for grid, kappa in [((2, 3), 0.05), ((2, 3), 1.0), ((3, 4), 0.7),
                        ((3, 4), 8.0), ((2, 6), 1.3), ((3, 5), 2.5)]:
        mesh = grid_mesh(*grid)
        assert mesh.n_vertices <= 60
        fem = assemble_fem(mesh)
        fd = fem.F.to_dense()
        gd = fem.G.to_dense()
        q_dense = c1 * (kappa ** 2 * fd + 2.0 * gd
                        + gd @ np.linalg.inv(fd) @ gd / kappa ** 2)
        cov = np.linalg.inv(q_dense)[np.ix_(mesh.data_indices,
                                            mesh.data_indices)]
        want = np.linalg.inv(cov)
        got = PrecisionBuilder(mesh).data_precision(kappa).to_dense()
        scale = max(1.0, np.abs(want).max())
        assert np.abs(got - want).max() <= 1e-9 * scale


def _moments_for_field(mean, cov):
    """Posterior-moment container for a single free-form Gaussian field."""
    n = mean.size
    prec = np.linalg.inv(cov)
    prec = (prec + prec.T) / 2.0
    factor = cholesky(SparseSym.from_dense(prec))
    blocks = np.diag(np.linalg.inv(prec)).reshape(n, 1, 1).copy()
    return PosteriorMoments(
        mu=mean.copy(), m=np.zeros(n), omega_inv_m=np.zeros(n),
        omega_inv_blocks=blocks, rinv_pattern_values=np.zeros((1, 1)),
        d=np.ones((1, n)), kappas=np.ones(1), factor=factor)


def _ordered_family_oracle(mean, cov, gamma, alpha):
    """Exact search over marginal-exceedance prefixes; returns set size."""
    sd = np.sqrt(np.diag(cov))
    p_marg = norm.sf((gamma - mean) / sd)
    order = np.argsort(-p_marg, kind="stable")
    k_max = int(np.count_nonzero(p_marg >= 1.0 - alpha))
    best = 0
    for k in range(1, k_max + 1):
        idx = order[:k]
        p = oracles.orthant_upper(mean[idx], cov[np.ix_(idx, idx)], gamma)
        if p >= 1.0 - alpha:
            best = k
    return best


def test_excursion_sets_match_exact_family_search():
    """Monte Carlo excursion sets track exact numeric integration.

    50 random 3-location Gaussians at 1e5 samples: the chosen set size
    may differ from the exact search over the same ordered family by at
    most one location, in at least 48 of 50 cases.
    """
    gamma, alpha = 1.0, 0.15
    rng = np.random.default_rng(20240505)
    agree = 0
    for trial in range(50):
        a = rng.standard_normal((3, 3))
        cov = a @ a.T / 3.0 + np.diag(rng.uniform(0.2, 0.6, 3))
        sd = np.sqrt(np.diag(cov))
        mean = gamma + sd * rng.uniform(-0.5, 2.0, 3)
        res = excursion_set(mean, _moments_for_field(mean, cov), 0, gamma,
                            alpha, n_samples=100000, seed=trial)
        k_mc = int(res.mask.sum())
        k_exact = _ordered_family_oracle(mean, cov, gamma, alpha)
        if abs(k_mc - k_exact) <= 1:
            agree += 1
    assert agree >= 48


@pytest.fixture(scope="module")
def reduced_scale_run(tmp_path_factory):
    """Five-subject pipeline run at the full production settings."""
    out = tmp_path_factory.mktemp("study")
    code, run_dir = pipeline.run_pipeline(
        out_dir=str(out), overrides=("simulate.subjects=5",),
        log=lambda msg: None)
    assert code == 0
    return pathlib.Path(run_dir)


def _metric_by_key(run_dir, metric):
    cols, rows = dataio.read_table(run_dir / "evaluate" / "ic_metrics.csv")
    idx = {name: cols.index(name) for name in ("subject", "ic", "method",
                                               metric)}
    out = {}
    for r in rows:
        key = (int(r[idx["subject"]]), int(r[idx["ic"]]), r[idx["method"]])
        out[key] = r[idx[metric]]
    return out


class TestReducedScaleStudy:
    """Production-settings study with 5 subjects; headline comparisons."""

    def test_correlation_ordering_spatial_over_template_over_dual(
            self, reduced_scale_run):
        corr = _metric_by_key(reduced_scale_run, "corr")
        pairs = [(s, l) for s in range(1, 6) for l in range(1, 4)]
        wins = sum(1 for s, l in pairs
                   if corr[(s, l, "stica")] > corr[(s, l, "tica")]
                   > corr[(s, l, "dual")])
        assert wins >= 12, f"ordering held for {wins}/15 pairs"

    def test_excursion_false_positive_rate_controlled(
            self, reduced_scale_run):
        fpr = _metric_by_key(reduced_scale_run, "fpr")
        vals = [v for (s, l, m), v in fpr.items() if m == "stica"]
        assert len(vals) == 15
        assert np.mean(vals) <= 0.10

    def test_spatial_power_beats_template_power(self, reduced_scale_run):
        power = _metric_by_key(reduced_scale_run, "power")
        for l in range(1, 4):
            st = np.mean([power[(s, l, "stica")] for s in range(1, 6)])
            ti = np.mean([power[(s, l, "tica")] for s in range(1, 6)])
            assert st > ti, f"component {l}: {st:.3f} vs {ti:.3f}"
            assert st >= 0.6, f"component {l}: mean power {st:.3f}"

    def test_connectivity_error_no_worse_than_dual_regression(
            self, reduced_scale_run):
        cols, rows = dataio.read_table(
            reduced_scale_run / "evaluate" / "fc_metrics.csv")
        fc = {(r[0], int(r[1]), int(r[2])): r[3] for r in rows}
        for a in range(1, 4):
            for b in range(a + 1, 4):
                assert fc[("stica", a, b)] <= fc[("dual", a, b)], (a, b)


def test_engagement_test_familywise_error_controlled():
    """Template-only engagement masks under a global null stay within
    the Bonferroni guarantee.

    The null draws each subject from the generative model with the peak
    amplitude far enough below the engagement level that the truth stays
    under it; a familywise error is any flagged location whose true value
    sits at or below the level. The frequency over 200 seeds must not
    exceed alpha plus the one-sided 95 percent binomial band.
    """
    dims = (8, 10)
    gamma, alpha = 1.0, 0.1
    mean = np.stack([
        gaussian_peak_map(dims, (2, 3), 0.1, 6.0).ravel(),
        gaussian_peak_map(dims, (5, 6), 0.1, 8.0).ravel()])
    variance = 0.5 * mean
    tpl = Template(mean=mean, variance=variance)
    pool = default_timecourse_pool(150, 6)
    hits = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MaxIterReached)
        for seed in range(200):
            rng = np.random.default_rng([9100, seed])
            effects = np.sqrt(variance) * rng.standard_normal(mean.shape)
            truth = SubjectTruth(ics=mean + effects, effects=effects)
            y = simulate_timeseries(truth, pool, 2, 0.2,
                                    rng_seed=[9101, seed])
            reduced, image_sd = pipeline.preprocess_one(y, tpl, 2)
            scaled = Template(mean=tpl.mean / image_sd,
                              variance=tpl.variance / image_sd ** 2)
            fit = fit_tica(reduced, scaled)
            masks = ttest_engagement(fit, gamma / image_sd, alpha=alpha)
            hits += bool(np.any(masks & (truth.ics <= gamma)))
    band = alpha + 1.645 * np.sqrt(alpha * (1 - alpha) / 200)
    assert hits / 200 <= band, f"{hits}/200 familywise false positives"


def test_pipeline_rerun_bitwise_identical_csvs(tiny_run, tmp_path):
    """Identical config and seeds reproduce every delimited file exactly."""
    code, second = pipeline.run_pipeline(
        config_path=str(tiny_run / "config.ini"),
        out_dir=str(tmp_path / "again"), log=lambda msg: None)
    assert code == 0
    second = pathlib.Path(second)
    compared = 0
    for ext in ("*.csv", "*.txt"):
        for fa in sorted(tiny_run.rglob(ext)):
            fb = second / fa.relative_to(tiny_run)
            assert fb.exists(), fb
            assert fa.read_bytes() == fb.read_bytes(), fa
            compared += 1
    assert compared > 50
