"""EM engine tests against dense reference implementations."""

import warnings

import numpy as np
import pytest

import oracles
from spatica import em
from spatica.em import (BoundaryMaximum, MaxIterReached, ModelParams,
                        PosteriorMoments, SingularSecondMoment,
                        _trace_against_pattern, build_omega, e_step,
                        fit_stica, fit_tica, floored_sd, init_kappa,
                        init_kappa_objective, kappa_objective, update_M,
                        update_kappa)
from spatica.mesh import NonPositiveKappa, PrecisionBuilder, grid_mesh
from spatica.preprocess import ReducedData
from spatica.sparsela import SparseSym, cholesky
from spatica.template import Template


@pytest.fixture(scope="module")
def tiny_builder():
    return PrecisionBuilder(grid_mesh(2, 3))  # 6 data locations


@pytest.fixture(scope="module")
def mid_builder():
    return PrecisionBuilder(grid_mesh(4, 5))  # 20 data locations


@pytest.fixture(scope="module")
def full_builder():
    return PrecisionBuilder(grid_mesh(46, 55))


def _instance(builder, n_comp, rng, kappas=1.0, nu0_sq=0.8):
    v = builder.n_data
    if np.isscalar(kappas):
        kappas = np.full(n_comp, float(kappas))
    else:
        kappas = np.asarray(kappas, dtype=np.float64)
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


def _model_data(builder, template, mixing, c_mat, nu0_sq, kappas, rng):
    """Draw reduced data from the generative model itself."""
    v = builder.n_data
    l = template.n_components
    d = floored_sd(template.variance)
    s = np.empty((l, v))
    for ic in range(l):
        f = cholesky(builder.data_precision(float(kappas[ic])))
        s[ic] = template.mean[ic] + d[ic] * f.half_solve_t(
            rng.standard_normal(v))
    ch = np.linalg.cholesky(c_mat)
    return mixing @ s + np.sqrt(nu0_sq) * (ch @ rng.standard_normal((l, v)))


class TestFlooredSd:
    def test_positive_input_is_sqrt(self):
        var = np.array([[4.0, 9.0, 0.25]])
        assert np.array_equal(floored_sd(var), [[2.0, 3.0, 0.5]])

    def test_zeros_floored_to_scaled_median(self):
        var = np.array([[0.0, 4.0, 16.0]])
        d = floored_sd(var)
        assert d[0, 0] == 1e-3 * 3.0  # median of the positive SDs (2, 4)

    def test_all_zero_map_gets_absolute_floor(self):
        d = floored_sd(np.zeros((1, 5)), floor_scale=1e-3)
        assert np.all(d == 1e-3)


class TestBuildOmega:
    def test_scalar_collapse(self, tiny_builder):
        # unit mixing, noise, and SD: the data term is exactly I
        rinv = tiny_builder.data_precision(1.0)
        v = rinv.order
        omega = build_omega([rinv], np.ones((1, v)), np.array([[1.0]]),
                            np.array([[1.0]]), 1.0)
        assert np.allclose(omega.to_dense(), rinv.to_dense() + np.eye(v),
                           rtol=0, atol=1e-14)

    def test_matches_dense_kronecker_formula(self, tiny_builder):
        rng = np.random.default_rng(41)
        params, reduced, template, rinv_list = _instance(
            tiny_builder, 2, rng, kappas=(0.7, 1.3))
        d = floored_sd(template.variance)
        omega = build_omega(rinv_list, d, params.mixing, params.C,
                            params.nu0_sq)
        ref = oracles.dense_omega([r.to_dense() for r in rinv_list], d,
                                  params.mixing, params.C, params.nu0_sq)
        assert np.allclose(omega.to_dense(), ref, rtol=0, atol=1e-12)

    def test_floored_zero_sd_stays_spd(self, tiny_builder):
        rng = np.random.default_rng(42)
        params, reduced, template, rinv_list = _instance(tiny_builder, 2, rng)
        var = template.variance.copy()
        var[0, :3] = 0.0
        d = floored_sd(var)
        omega = build_omega(rinv_list, d, params.mixing, params.C,
                            params.nu0_sq)
        assert np.linalg.eigvalsh(omega.to_dense()).min() > 0
        cholesky(omega)  # must not raise

    def test_mismatched_patterns_rejected(self, tiny_builder):
        rinv = tiny_builder.data_precision(1.0)
        other = SparseSym.identity(rinv.order)
        with pytest.raises(ValueError):
            build_omega([rinv, other], np.ones((2, rinv.order)), np.eye(2),
                        np.eye(2), 1.0)


class TestEStep:
    def test_zero_data_zero_mean_gives_zero_posterior(self, tiny_builder):
        rng = np.random.default_rng(43)
        params, reduced, template, rinv_list = _instance(tiny_builder, 2, rng)
        v = tiny_builder.n_data
        template = Template(mean=np.zeros((2, v)),
                            variance=template.variance)
        reduced = ReducedData(y=np.zeros((2, v)), H=reduced.H, C=reduced.C,
                              nu0_sq=reduced.nu0_sq)
        moments = e_step(params, reduced, template, rinv_list)
        assert np.array_equal(moments.mu, np.zeros(2 * v))

    def test_matches_dense_oracle(self, tiny_builder):
        rng = np.random.default_rng(44)
        params, reduced, template, rinv_list = _instance(
            tiny_builder, 2, rng, kappas=(0.7, 1.3))
        d = floored_sd(template.variance)
        moments = e_step(params, reduced, template, rinv_list)
        post = oracles.dense_posterior(
            [r.to_dense() for r in rinv_list], d, params.mixing, params.C,
            params.nu0_sq, reduced.y, template.mean)
        v = tiny_builder.n_data
        assert np.allclose(moments.m, post["m"], rtol=1e-9, atol=1e-9)
        assert np.allclose(moments.mu, post["mu"], rtol=1e-9, atol=1e-9)
        assert np.allclose(moments.omega_inv_m, post["omega_inv"] @ post["m"],
                           rtol=1e-9, atol=1e-9)
        for loc in range(v):
            idx = loc + v * np.arange(2)
            assert np.allclose(moments.omega_inv_blocks[loc],
                               post["omega_inv"][np.ix_(idx, idx)],
                               rtol=1e-9, atol=1e-9)
        for ic in range(2):
            r = rinv_list[ic]
            ref = post["omega_inv"][ic * v + r.rows, ic * v + r.cols]
            assert np.allclose(moments.rinv_pattern_values[ic], ref,
                               rtol=1e-9, atol=1e-9)

    def test_infinite_noise_returns_prior_mean(self, tiny_builder):
        rng = np.random.default_rng(45)
        params, reduced, template, rinv_list = _instance(
            tiny_builder, 2, rng, nu0_sq=1e12)
        moments = e_step(params, reduced, template, rinv_list)
        scale = np.abs(template.mean).max()
        err = np.abs(moments.mu - template.mean.ravel()).max()
        assert err < 1e-4 * scale

    def test_location_blocks_symmetric_pd(self, tiny_builder):
        rng = np.random.default_rng(46)
        params, reduced, template, rinv_list = _instance(tiny_builder, 3, rng)
        moments = e_step(params, reduced, template, rinv_list)
        blocks = moments.omega_inv_blocks
        assert np.abs(blocks - blocks.transpose(0, 2, 1)).max() < 1e-10
        assert np.linalg.eigvalsh(blocks).min() > 0

    def test_posterior_mean_identity(self, tiny_builder):
        rng = np.random.default_rng(47)
        params, reduced, template, rinv_list = _instance(tiny_builder, 2, rng)
        moments = e_step(params, reduced, template, rinv_list)
        assert np.array_equal(moments.mu,
                              moments.d.ravel() * moments.omega_inv_m)


class TestUpdateM:
    def test_scalar_closed_form(self):
        # T = d^2 z + t^2 = 1 + 9, sum y t = 15, so the update is 1.5
        moments = PosteriorMoments(
            mu=np.array([3.0]), m=np.zeros(1), omega_inv_m=np.zeros(1),
            omega_inv_blocks=np.array([[[0.25]]]),
            rinv_pattern_values=np.zeros((1, 1)), d=np.array([[2.0]]),
            kappas=np.ones(1), factor=None)
        reduced = ReducedData(y=np.array([[5.0]]), H=np.eye(1), C=np.eye(1),
                              nu0_sq=1.0)
        assert np.allclose(update_M(moments, reduced), [[1.5]], rtol=1e-15)

    def test_matches_dense_oracle(self, tiny_builder):
        rng = np.random.default_rng(48)
        params, reduced, template, rinv_list = _instance(tiny_builder, 2, rng)
        d = floored_sd(template.variance)
        moments = e_step(params, reduced, template, rinv_list)
        post = oracles.dense_posterior(
            [r.to_dense() for r in rinv_list], d, params.mixing, params.C,
            params.nu0_sq, reduced.y, template.mean)
        ref = oracles.dense_update_m(reduced.y, post, tiny_builder.n_data, 2)
        assert np.allclose(update_M(moments, reduced), ref,
                           rtol=1e-9, atol=1e-9)

    def test_zero_sd_reduces_to_least_squares(self):
        rng = np.random.default_rng(49)
        t = rng.standard_normal((2, 6))
        y = rng.standard_normal((2, 6))
        moments = PosteriorMoments(
            mu=t.ravel(), m=np.zeros(12), omega_inv_m=np.zeros(12),
            omega_inv_blocks=rng.random((6, 2, 2)),
            rinv_pattern_values=np.zeros((2, 1)), d=np.zeros((2, 6)),
            kappas=np.ones(2), factor=None)
        reduced = ReducedData(y=y, H=np.eye(2), C=np.eye(2), nu0_sq=1.0)
        ols = y @ t.T @ np.linalg.inv(t @ t.T)
        assert np.allclose(update_M(moments, reduced), ols, rtol=1e-12)

    def test_degenerate_second_moment_raises(self):
        moments = PosteriorMoments(
            mu=np.zeros(2), m=np.zeros(2), omega_inv_m=np.zeros(2),
            omega_inv_blocks=np.zeros((2, 1, 1)),
            rinv_pattern_values=np.zeros((1, 1)), d=np.zeros((1, 2)),
            kappas=np.ones(1), factor=None)
        reduced = ReducedData(y=np.ones((1, 2)), H=np.eye(1), C=np.eye(1),
                              nu0_sq=1.0)
        with pytest.raises(SingularSecondMoment):
            update_M(moments, reduced)


class TestKappaObjective:
    def test_matches_dense_literal(self, tiny_builder):
        rng = np.random.default_rng(50)
        params, reduced, template, rinv_list = _instance(tiny_builder, 2, rng)
        d = floored_sd(template.variance)
        moments = e_step(params, reduced, template, rinv_list)
        post = oracles.dense_posterior(
            [r.to_dense() for r in rinv_list], d, params.mixing, params.C,
            params.nu0_sq, reduced.y, template.mean)
        v = tiny_builder.n_data
        w_full = post["omega_inv"] @ post["m"]
        for kappa in (0.3, 1.0, 3.0):
            rinv_d = tiny_builder.data_precision(kappa).to_dense()
            for ic in range(2):
                idx = slice(ic * v, (ic + 1) * v)
                ref = oracles.dense_kappa_objective(
                    rinv_d, post["omega_inv"][idx, idx], w_full[idx],
                    template.mean[ic] / d[ic])
                mine = kappa_objective(kappa, ic, moments, template,
                                       tiny_builder)
                assert abs(mine - ref) < 1e-9 * max(1.0, abs(ref))

    def test_trace_identity_against_dense(self, tiny_builder):
        rng = np.random.default_rng(51)
        rinv = tiny_builder.data_precision(0.9)
        b = rng.standard_normal((rinv.order, rinv.order))
        b = b + b.T
        mine = _trace_against_pattern(rinv, b[rinv.rows, rinv.cols])
        ref = np.trace(rinv.to_dense() @ b)
        assert abs(mine - ref) < 1e-10 * max(1.0, abs(ref))

    def test_rank_one_trace_shortcut(self, tiny_builder):
        rng = np.random.default_rng(52)
        rinv = tiny_builder.data_precision(1.1)
        w = rng.standard_normal(rinv.order)
        via_pattern = _trace_against_pattern(rinv, w[rinv.rows] * w[rinv.cols])
        via_quadratic = w @ rinv.matvec(w)
        assert abs(via_pattern - via_quadratic) < 1e-10 * abs(via_quadratic)

    def test_nonpositive_kappa_rejected(self, tiny_builder):
        rng = np.random.default_rng(53)
        params, reduced, template, rinv_list = _instance(tiny_builder, 1, rng)
        moments = e_step(params, reduced, template, rinv_list)
        with pytest.raises(NonPositiveKappa):
            kappa_objective(0.0, 0, moments, template, tiny_builder)


class TestUpdateKappa:
    def test_common_equals_per_ic_for_one_component(self, tiny_builder):
        rng = np.random.default_rng(54)
        params, reduced, template, rinv_list = _instance(
            tiny_builder, 1, rng, kappas=0.8)
        moments = e_step(params, reduced, template, rinv_list)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryMaximum)
            k_common = update_kappa(moments, template, tiny_builder,
                                    mode="common")
            k_per = update_kappa(moments, template, tiny_builder,
                                 mode="per-ic")
        assert np.array_equal(k_common, k_per)

    def test_matches_grid_search(self, tiny_builder):
        rng = np.random.default_rng(55)
        params, reduced, template, rinv_list = _instance(
            tiny_builder, 1, rng, kappas=1.0)
        moments = e_step(params, reduced, template, rinv_list)
        grid = np.linspace(-3.0, 3.0, 1000)  # ln kappa around the current 1.0
        vals = [kappa_objective(float(np.exp(g)), 0, moments, template,
                                tiny_builder) for g in grid]
        best = grid[int(np.argmax(vals))]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryMaximum)
            k_hat = update_kappa(moments, template, tiny_builder,
                                 mode="per-ic")
        assert abs(np.log(k_hat[0]) - best) <= grid[1] - grid[0]

    def test_ascent_property(self, tiny_builder):
        rng = np.random.default_rng(56)
        params, reduced, template, rinv_list = _instance(
            tiny_builder, 2, rng, kappas=(0.6, 1.4))
        moments = e_step(params, reduced, template, rinv_list)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryMaximum)
            k_new = update_kappa(moments, template, tiny_builder,
                                 mode="per-ic")
        for ic in range(2):
            before = kappa_objective(moments.kappas[ic], ic, moments,
                                     template, tiny_builder)
            after = kappa_objective(k_new[ic], ic, moments, template,
                                    tiny_builder)
            assert after >= before - 1e-12 * abs(before)

    def test_unknown_mode_rejected(self, tiny_builder):
        rng = np.random.default_rng(57)
        params, reduced, template, rinv_list = _instance(tiny_builder, 1, rng)
        moments = e_step(params, reduced, template, rinv_list)
        with pytest.raises(ValueError):
            update_kappa(moments, template, tiny_builder, mode="global")


class TestInitKappa:
    def test_objective_matches_dense(self, tiny_builder):
        rng = np.random.default_rng(58)
        v = tiny_builder.n_data
        delta = rng.standard_normal(v)
        d = 0.3 + rng.random(v)
        for kappa in (0.3, 1.0, 3.0):
            mine = init_kappa_objective(kappa, delta, d, tiny_builder, 0.5)
            rinv_d = tiny_builder.data_precision(kappa).to_dense()
            ref = oracles.dense_init_objective(rinv_d, d, delta, 0.5)
            assert abs(mine - ref) < 1e-9 * max(1.0, abs(ref))

    def test_stacked_single_component_identical(self, tiny_builder):
        rng = np.random.default_rng(59)
        v = tiny_builder.n_data
        delta = rng.standard_normal(v)
        d = 0.5 + rng.random(v)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryMaximum)
            flat = init_kappa(delta, d, tiny_builder, 0.25)
            stacked = init_kappa(delta[None, :], d[None, :], tiny_builder,
                                 0.25)
        assert flat == stacked

    def test_nonpositive_noise_variance_rejected(self, tiny_builder):
        with pytest.raises(ValueError):
            init_kappa_objective(1.0, np.zeros(6), np.ones(6), tiny_builder,
                                 0.0)

    def test_recovers_generating_smoothness(self, full_builder):
        # deviation drawn from the spatial prior at kappa 1, light noise
        rng = np.random.default_rng(60)
        rinv = full_builder.data_precision(1.0)
        f = cholesky(rinv, perm=full_builder.r_ordering())
        draw = f.half_solve_t(rng.standard_normal(rinv.order))
        sigma = 0.05
        delta_hat = draw + sigma * rng.standard_normal(rinv.order)
        k0 = init_kappa(delta_hat, np.ones(rinv.order), full_builder,
                        sigma ** 2)
        assert 0.75 <= k0 <= 1.25


class TestSquarem:
    def test_clamped_step_reproduces_second_iterate(self):
        theta0 = np.array([1.0, 2.0])
        theta1 = np.array([1.5, 2.2])
        theta2 = np.array([2.5, 3.4])  # step norm grows: alpha clamps to -1
        out = em._squarem_extrapolate(theta0, theta1, theta2)
        assert np.allclose(out, theta2, rtol=0, atol=1e-12)

    def test_geometric_sequence_lands_on_fixed_point(self):
        # increments 2 then 1: contraction rate 1/2, fixed point at 4
        out = em._squarem_extrapolate(np.array([0.0]), np.array([2.0]),
                                      np.array([3.0]))
        assert np.allclose(out, [4.0], rtol=0, atol=1e-12)

    def test_stationary_input_returns_last(self):
        theta = np.array([1.0, -2.0])
        assert np.array_equal(
            em._squarem_extrapolate(theta, theta, theta), theta)


class TestFitStica:
    def test_loglik_nondecreasing_without_squarem(self, tiny_builder):
        rng = np.random.default_rng(61)
        params, reduced, template, _ = _instance(tiny_builder, 2, rng)
        kappas = np.array([1.0, 1.0])
        y = _model_data(tiny_builder, template, params.mixing, params.C,
                        params.nu0_sq, kappas, rng)
        reduced = ReducedData(y=y, H=reduced.H, C=reduced.C,
                              nu0_sq=reduced.nu0_sq)
        d = floored_sd(template.variance)
        mixing = y @ np.linalg.pinv(template.mean)
        lls = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryMaximum)
            for _ in range(6):
                rinv_list = [tiny_builder.data_precision(float(k))
                             for k in kappas]
                cur = ModelParams(mixing=mixing, kappas=kappas,
                                  nu0_sq=reduced.nu0_sq, C=reduced.C)
                lls.append(oracles.observed_loglik(
                    [r.to_dense() for r in rinv_list], d, mixing, reduced.C,
                    reduced.nu0_sq, y, template.mean))
                moments = e_step(cur, reduced, template, rinv_list)
                mixing = update_M(moments, reduced)
                kappas = update_kappa(moments, template, tiny_builder,
                                      mode="per-ic")
        diffs = np.diff(lls)
        assert np.all(diffs >= -1e-8 * np.abs(np.asarray(lls[:-1])))

    def test_noiseless_zero_deviation_recovers_template(self, tiny_builder):
        rng = np.random.default_rng(62)
        params, reduced, template, _ = _instance(tiny_builder, 2, rng)
        y = params.mixing @ template.mean  # exact, no deviation, no noise
        reduced = ReducedData(y=y, H=reduced.H, C=reduced.C, nu0_sq=1e-4)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = fit_stica(reduced, template, None, max_iter=40,
                               builder=tiny_builder)
        assert np.abs(result.subject_effects).max() < 1e-3
        assert np.allclose(result.subject_ics, template.mean, atol=1e-3)

    def test_one_iteration_matches_dense_at_mid_size(self, mid_builder):
        for seed in (63, 64):
            rng = np.random.default_rng(seed)
            params, reduced, template, rinv_list = _instance(
                mid_builder, 3, rng, kappas=(0.7, 1.0, 1.6))
            d = floored_sd(template.variance)
            moments = e_step(params, reduced, template, rinv_list)
            post = oracles.dense_posterior(
                [r.to_dense() for r in rinv_list], d, params.mixing,
                params.C, params.nu0_sq, reduced.y, template.mean)
            v = mid_builder.n_data
            assert np.allclose(moments.mu, post["mu"], rtol=1e-8, atol=1e-8)
            for loc in range(v):
                idx = loc + v * np.arange(3)
                assert np.allclose(moments.omega_inv_blocks[loc],
                                   post["omega_inv"][np.ix_(idx, idx)],
                                   rtol=1e-8, atol=1e-8)
            m_ref = oracles.dense_update_m(reduced.y, post, v, 3)
            assert np.allclose(update_M(moments, reduced), m_ref,
                               rtol=1e-8, atol=1e-8)
            w_full = post["omega_inv"] @ post["m"]
            for kappa in (0.5, 1.0, 2.0):
                rinv_d = mid_builder.data_precision(kappa).to_dense()
                for ic in range(3):
                    idx = slice(ic * v, (ic + 1) * v)
                    ref = oracles.dense_kappa_objective(
                        rinv_d, post["omega_inv"][idx, idx], w_full[idx],
                        template.mean[ic] / d[ic])
                    mine = kappa_objective(kappa, ic, moments, template,
                                           mid_builder)
                    assert abs(mine - ref) < 1e-8 * max(1.0, abs(ref))

    def test_max_iter_flags_unconverged(self, tiny_builder):
        rng = np.random.default_rng(65)
        params, reduced, template, _ = _instance(tiny_builder, 2, rng)
        with pytest.warns(MaxIterReached):
            result = fit_stica(reduced, template, None, max_iter=1,
                               builder=tiny_builder)
        assert not result.converged
        assert result.iterations == 1

    def test_converges_on_model_data(self, tiny_builder):
        rng = np.random.default_rng(66)
        params, reduced, template, _ = _instance(tiny_builder, 2, rng)
        kappas = np.array([1.0, 1.0])
        y = _model_data(tiny_builder, template, params.mixing, params.C,
                        params.nu0_sq, kappas, rng)
        reduced = ReducedData(y=y, H=reduced.H, C=reduced.C,
                              nu0_sq=reduced.nu0_sq)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = fit_stica(reduced, template, None, max_iter=80,
                               builder=tiny_builder)
        assert np.all(np.isfinite(result.params.mixing))
        assert np.all(result.params.kappas > 0)
        assert np.all(result.marginal_sd >= 0)
        assert result.wall_seconds > 0
        if result.converged:
            assert result.trace[-1] < 1e-3

    def test_ics_are_template_mean_plus_effects(self, tiny_builder):
        rng = np.random.default_rng(67)
        params, reduced, template, _ = _instance(tiny_builder, 2, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = fit_stica(reduced, template, None, max_iter=4,
                               builder=tiny_builder)
        assert np.array_equal(result.subject_ics,
                              template.mean + result.subject_effects)

    def test_pattern_stable_across_kappa(self, tiny_builder):
        rng = np.random.default_rng(68)
        v = tiny_builder.n_data
        tpl = em.OmegaTemplate(tiny_builder.r_rows, tiny_builder.r_cols,
                               v, 2, perm_r=tiny_builder.r_ordering())
        g = np.eye(2) + 0.2
        d = 0.5 + rng.random((2, v))
        om_a = tpl.assemble([tiny_builder.data_precision(0.5)] * 2, d, g)
        om_b = tpl.assemble([tiny_builder.data_precision(2.0)] * 2, d, g)
        assert np.array_equal(om_a.rows, om_b.rows)
        assert np.array_equal(om_a.cols, om_b.cols)
        tpl.factorize(om_a)
        tpl.factorize(om_b)  # symbolic reuse must accept the new values


class TestFitTica:
    def test_matches_conjugate_oracle(self, tiny_builder):
        rng = np.random.default_rng(69)
        params, reduced, template, _ = _instance(tiny_builder, 2, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MaxIterReached)
            result = fit_tica(reduced, template)
        d = floored_sd(template.variance)
        mu_ref, cov_ref = oracles.tica_posterior(
            result.params.mixing, reduced.C, reduced.nu0_sq, d,
            template.mean, reduced.y)
        assert np.allclose(result.subject_ics, mu_ref, rtol=1e-9, atol=1e-9)
        sd_ref = np.sqrt(cov_ref[:, np.arange(2), np.arange(2)].T)
        assert np.allclose(result.marginal_sd, sd_ref, rtol=1e-9, atol=1e-9)
        assert result.params.kappas.size == 0

    def test_zero_noise_gives_least_squares_maps(self, tiny_builder):
        rng = np.random.default_rng(70)
        params, reduced, template, _ = _instance(tiny_builder, 2, rng)
        reduced = ReducedData(y=reduced.y, H=reduced.H, C=reduced.C,
                              nu0_sq=1e-10)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MaxIterReached)
            result = fit_tica(reduced, template)
        ls = np.linalg.solve(result.params.mixing, reduced.y)
        err = np.abs(result.subject_ics - ls).max()
        assert err < 1e-4 * np.abs(ls).max()

    def test_zero_prior_sd_returns_template_mean(self, tiny_builder):
        rng = np.random.default_rng(71)
        params, reduced, template, _ = _instance(tiny_builder, 2, rng)
        template = Template(mean=template.mean,
                            variance=np.zeros_like(template.variance))
        result = fit_tica(reduced, template, d_floor_scale=0.0)
        assert np.array_equal(result.subject_ics, template.mean)
        assert np.all(result.subject_effects == 0)
        assert np.all(result.marginal_sd == 0)
        assert result.converged

    def test_ics_are_template_mean_plus_effects(self, tiny_builder):
        rng = np.random.default_rng(72)
        params, reduced, template, _ = _instance(tiny_builder, 3, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MaxIterReached)
            result = fit_tica(reduced, template)
        assert np.array_equal(result.subject_ics,
                              template.mean + result.subject_effects)
