"""Staged run orchestration: template, simulate, preprocess, fit,
excursions, evaluate.

A run directory is the unit of work. Stages read what earlier stages
wrote there, so a config can execute any prefix now and the rest later.
Every random draw is seeded from the master seed plus a fixed stream id
and the subject index, which makes reruns of the same config reproduce
every CSV byte for byte. A manifest records versions, the resolved
config, and per-stage wall time.
"""

import configparser
import json
import os
import sys
import time

import numpy as np

from . import __version__, dataio, em, figures, inference, metrics
from .mesh import PrecisionBuilder, TriMesh, grid_mesh
from .preprocess import ReducedData, center_scale, dimension_reduce, \
    dual_regression, remove_nuisance
from .template import PeakSpec, Template, default_timecourse_pool, \
    estimate_template, generate_population, simulate_subject, \
    simulate_timeseries

STAGE_ORDER = ("template", "simulate", "preprocess", "fit", "excursions",
               "evaluate")

DEFAULT_CONFIG = {
    "pipeline": {
        "stages": "template,simulate,preprocess,fit,excursions,evaluate",
        "seed": "42",
    },
    "template": {
        "dims": "46x55",
        "components": "3",
        "centers": "12x15,35x40,15x40",
        "fwhms": "30,40,45",
        "amplitude": "6.0",
        "var_scale": "0.5",
        "smooth_fwhm": "5.0",
        "train_subjects": "1000",
    },
    "simulate": {
        "subjects": "5",
        "t_len": "800",
        "noise_sd": "11.2",
        "pool_size": "16",
    },
    "preprocess": {
        "nuisance_iters": "0",
        "nuisance_count": "",
    },
    "fit": {
        "methods": "stica,tica,dual",
        "mode": "common",
        "tol": "0.001",
        "max_iter": "100",
        "squarem": "true",
    },
    "excursions": {
        "gamma": "1.0",
        "alpha": "0.1",
        "samples": "10000",
        "direction": "positive",
    },
    "evaluate": {
        "cat_threshold": "1.0",
        "figures": "true",
        "heatmaps": "true",
        "oracle_fc": "true",
    },
}

# fixed rng stream ids; a new stream must take the next integer, never
# reuse one, or old configs stop reproducing their outputs
_STREAM_TRAIN = 0
_STREAM_TRUTH = 1
_STREAM_TIMESERIES = 2
_STREAM_NUISANCE = 3


class StageError(RuntimeError):
    """A pipeline stage failed; `stage` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class BadConfig(ValueError):
    pass


def load_config(path=None, overrides=()):
    """Defaults, then the file, then `section.key=value` overrides."""
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(DEFAULT_CONFIG)
    if path is not None:
        if not os.path.exists(path):
            raise BadConfig(f"config file not found: {path}")
        cfg.read(path)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise BadConfig(f"override must be section.key=value: {item!r}")
        section, _, option = key.partition(".")
        if not cfg.has_section(section):
            cfg.add_section(section)
        cfg.set(section.strip(), option.strip(), value.strip())
    return cfg


def parse_dims(text):
    try:
        rows, cols = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise BadConfig(f"dims must look like 46x55, got {text!r}") from None
    return rows, cols


def parse_centers(text):
    out = []
    for tok in text.split(","):
        r, _, c = tok.strip().partition("x")
        out.append((int(r), int(c)))
    return out


def parse_floats(text):
    return [float(t) for t in text.split(",")]


def _subject_dirs(run_dir, n_subjects):
    width = max(2, len(str(n_subjects)))
    return [os.path.join(run_dir, "subjects", f"s{j + 1:0{width}d}")
            for j in range(n_subjects)]


def _save_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# stages


def build_template_dir(out, dims, centers, fwhms, amplitude, var_scale,
                       smooth_fwhm, train, seed, t_len, pool_size):
    """Write a self-contained template directory.

    Holds the generating maps, the Monte Carlo population template, the
    timecourse pool, the mesh for the grid, and a meta.json describing
    the generator settings.
    """
    if len(centers) != len(fwhms):
        raise BadConfig("centers and fwhms must list one entry per component")
    n_comp = len(centers)
    specs = [PeakSpec(tuple(c), amplitude, f)
             for c, f in zip(centers, fwhms)]
    gen_mean, gen_var = generate_population(dims, specs, var_scale)
    ics = [simulate_subject(gen_mean, gen_var, smooth_fwhm=smooth_fwhm,
                            rng_seed=[seed, _STREAM_TRAIN, i]).ics
           for i in range(train)]
    tpl = estimate_template(ics)

    os.makedirs(out, exist_ok=True)
    dataio.save_template(out, tpl)
    for l in range(n_comp):
        dataio.save_csv(os.path.join(out, f"gen_mean_{l + 1}.csv"),
                        gen_mean[l].ravel())
        dataio.save_csv(os.path.join(out, f"gen_var_{l + 1}.csv"),
                        gen_var[l].ravel())
    dataio.save_csv(os.path.join(out, "pool.csv"),
                    default_timecourse_pool(t_len, pool_size))
    grid_mesh(*dims).save_txt(os.path.join(out, "mesh.txt"))
    _save_json(os.path.join(out, "meta.json"), {
        "dims": list(dims), "components": n_comp,
        "centers": [list(c) for c in centers], "fwhms": list(fwhms),
        "amplitude": amplitude, "var_scale": var_scale,
        "smooth_fwhm": smooth_fwhm, "train_subjects": train, "seed": seed,
    })
    return out


def _stage_template(cfg, run_dir):
    sec = cfg["template"]
    n_comp = int(sec["components"])
    centers = parse_centers(sec["centers"])
    fwhms = parse_floats(sec["fwhms"])
    if len(centers) != n_comp:
        raise BadConfig("centers must list one entry per component")
    build_template_dir(
        os.path.join(run_dir, "template"), parse_dims(sec["dims"]), centers,
        fwhms, float(sec["amplitude"]), float(sec["var_scale"]),
        float(sec["smooth_fwhm"]), int(sec["train_subjects"]),
        cfg.getint("pipeline", "seed"), cfg.getint("simulate", "t_len"),
        cfg.getint("simulate", "pool_size"))


def simulate_subjects(template_dir, run_dir, n_subjects, noise_sd, seed):
    """Draw test subjects from a template directory's generating maps.

    Writes subjects/sNN/{y.csv, truth_ic_<l>.csv, truth_effect_<l>.csv,
    truth_mixing.csv} under run_dir.
    """
    meta = _load_json(os.path.join(template_dir, "meta.json"))
    dims = tuple(meta["dims"])
    n_comp = meta["components"]
    gen_mean = np.stack([
        dataio.load_csv(os.path.join(template_dir, f"gen_mean_{l + 1}.csv"))
        .reshape(dims) for l in range(n_comp)])
    gen_var = np.stack([
        dataio.load_csv(os.path.join(template_dir, f"gen_var_{l + 1}.csv"))
        .reshape(dims) for l in range(n_comp)])
    pool = dataio.load_csv(os.path.join(template_dir, "pool.csv"))

    for j, sdir in enumerate(_subject_dirs(run_dir, n_subjects)):
        os.makedirs(sdir, exist_ok=True)
        truth = simulate_subject(gen_mean, gen_var,
                                 smooth_fwhm=meta["smooth_fwhm"],
                                 rng_seed=[seed, _STREAM_TRUTH, j])
        y = simulate_timeseries(truth, pool, n_comp, noise_sd,
                                rng_seed=[seed, _STREAM_TIMESERIES, j])
        dataio.save_csv(os.path.join(sdir, "y.csv"), y)
        dataio.save_csv(os.path.join(sdir, "truth_mixing.csv"),
                        truth.mixing_timecourses)
        for l in range(n_comp):
            dataio.save_csv(os.path.join(sdir, f"truth_ic_{l + 1}.csv"),
                            truth.ics[l])
            dataio.save_csv(os.path.join(sdir, f"truth_effect_{l + 1}.csv"),
                            truth.effects[l])


def _stage_simulate(cfg, run_dir):
    simulate_subjects(os.path.join(run_dir, "template"), run_dir,
                      cfg.getint("simulate", "subjects"),
                      cfg.getfloat("simulate", "noise_sd"),
                      cfg.getint("pipeline", "seed"))


def preprocess_one(y, template, n_components, nuisance_iters=0,
                   nuisance_count=None, rng_seed=None):
    """Center/scale, optional nuisance removal, then dimension reduction.

    Returns (reduced, image_sd). The template only participates when
    nuisance removal is on (its means define the signal to protect).
    """
    yc, stats = center_scale(y)
    if nuisance_iters > 0:
        yc = remove_nuisance(yc, template, iterations=nuisance_iters,
                             forced_count=nuisance_count, rng_seed=rng_seed)
    reduced = dimension_reduce(yc, n_components)
    return reduced, (stats.image_sd if stats.scaled else 1.0)


def save_reduced(out, reduced, image_sd):
    os.makedirs(out, exist_ok=True)
    dataio.save_csv(os.path.join(out, "y.csv"), reduced.y)
    dataio.save_csv(os.path.join(out, "H.csv"), reduced.H)
    dataio.save_csv(os.path.join(out, "C.csv"), reduced.C)
    with open(os.path.join(out, "nu0sq.txt"), "w") as fh:
        fh.write("%.17g\n" % reduced.nu0_sq)
    with open(os.path.join(out, "scale.txt"), "w") as fh:
        fh.write("%.17g\n" % image_sd)


def load_reduced(prep_dir):
    with open(os.path.join(prep_dir, "nu0sq.txt")) as fh:
        nu0_sq = float(fh.read())
    with open(os.path.join(prep_dir, "scale.txt")) as fh:
        image_sd = float(fh.read())
    reduced = ReducedData(
        y=dataio.load_csv(os.path.join(prep_dir, "y.csv")),
        H=dataio.load_csv(os.path.join(prep_dir, "H.csv")),
        C=dataio.load_csv(os.path.join(prep_dir, "C.csv")),
        nu0_sq=nu0_sq)
    return reduced, image_sd


def _stage_preprocess(cfg, run_dir):
    tdir = os.path.join(run_dir, "template")
    tpl = dataio.load_template(tdir)
    seed = cfg.getint("pipeline", "seed")
    iters = cfg.getint("preprocess", "nuisance_iters")
    count_raw = cfg.get("preprocess", "nuisance_count").strip()
    count = int(count_raw) if count_raw else None
    n_subj = cfg.getint("simulate", "subjects")
    for j, sdir in enumerate(_subject_dirs(run_dir, n_subj)):
        y = dataio.load_csv(os.path.join(sdir, "y.csv"))
        reduced, image_sd = preprocess_one(
            y, tpl, tpl.n_components, nuisance_iters=iters,
            nuisance_count=count, rng_seed=[seed, _STREAM_NUISANCE, j])
        save_reduced(os.path.join(sdir, "prep"), reduced, image_sd)


def save_fit_dir(out, fit, reduced, image_sd, method, mode=None, seed=None,
                 mesh_path=None, scaled_template=None):
    """Fit-directory layout shared by the CLI and the pipeline.

    Maps are written in data units (scaled back by image_sd); model/
    holds everything needed to rebuild the posterior for excursion
    sampling without refitting.
    """
    os.makedirs(out, exist_ok=True)
    n_comp = fit.subject_ics.shape[0]
    for l in range(n_comp):
        dataio.save_csv(os.path.join(out, f"ic_{l + 1}.csv"),
                        fit.subject_ics[l] * image_sd)
        dataio.save_csv(os.path.join(out, f"effect_{l + 1}.csv"),
                        fit.subject_effects[l] * image_sd)
        dataio.save_csv(os.path.join(out, f"sd_{l + 1}.csv"),
                        fit.marginal_sd[l] * image_sd)
    dataio.save_csv(os.path.join(out, "mixing.csv"),
                    np.linalg.pinv(reduced.H) @ fit.params.mixing)
    if method == "stica":
        with open(os.path.join(out, "kappa.txt"), "w") as fh:
            for k in fit.params.kappas:
                fh.write("%.17g\n" % k)
    dataio.save_csv(os.path.join(out, "trace.csv"), fit.trace)

    model = os.path.join(out, "model")
    os.makedirs(model, exist_ok=True)
    params = {
        "method": method, "mode": mode, "seed": seed,
        "n_components": int(n_comp),
        "mixing": fit.params.mixing.tolist(),
        "kappas": (fit.params.kappas.tolist() if method == "stica" else None),
        "nu0_sq": float(fit.params.nu0_sq), "scale": float(image_sd),
        "mesh": mesh_path, "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "wall_seconds": float(fit.wall_seconds),
    }
    _save_json(os.path.join(model, "params.json"), params)
    dataio.save_csv(os.path.join(model, "y.csv"), reduced.y)
    dataio.save_csv(os.path.join(model, "C.csv"), reduced.C)
    if scaled_template is not None:
        dataio.save_csv(os.path.join(model, "mean.csv"), scaled_template.mean)
    if fit.moments is not None:
        dataio.save_csv(os.path.join(model, "d.csv"), fit.moments.d)


def rebuild_moments(fit_dir, builder=None):
    """Posterior moments from a saved spatial fit directory.

    Reloads the reduced data and fitted parameters and reruns the
    moment computation; `builder` (a PrecisionBuilder on the fit's mesh)
    is constructed from the recorded mesh path when not supplied.
    Returns (moments, params_dict).
    """
    model = os.path.join(fit_dir, "model")
    params = _load_json(os.path.join(model, "params.json"))
    if params["method"] != "stica":
        raise ValueError("joint sampling needs a spatial fit directory")
    if builder is None:
        mesh_path = params.get("mesh")
        if not mesh_path or not os.path.exists(mesh_path):
            raise FileNotFoundError(
                f"mesh file recorded at fit time is missing: {mesh_path!r}")
        builder = PrecisionBuilder(TriMesh.load_txt(mesh_path))
    mean = dataio.load_csv(os.path.join(model, "mean.csv"))
    d = dataio.load_csv(os.path.join(model, "d.csv"))
    reduced = ReducedData(y=dataio.load_csv(os.path.join(model, "y.csv")),
                          H=None,
                          C=dataio.load_csv(os.path.join(model, "C.csv")),
                          nu0_sq=params["nu0_sq"])
    kappas = np.asarray(params["kappas"], dtype=np.float64)
    model_params = em.ModelParams(
        mixing=np.asarray(params["mixing"], dtype=np.float64),
        kappas=kappas, nu0_sq=params["nu0_sq"], C=reduced.C)
    rinvs = []
    cache = {}
    for k in kappas:
        if float(k) not in cache:
            cache[float(k)] = builder.data_precision(float(k))
        rinvs.append(cache[float(k)])
    omega_template = em.OmegaTemplate(builder.r_rows, builder.r_cols,
                                      builder.n_data, kappas.size,
                                      perm_r=builder.r_ordering())
    tpl = Template(mean=mean, variance=d ** 2)
    moments = em.e_step(model_params, reduced, tpl, rinvs, d=d,
                        omega_template=omega_template)
    return moments, params


def _stage_fit(cfg, run_dir):
    tdir = os.path.join(run_dir, "template")
    tpl = dataio.load_template(tdir)
    methods = [m.strip() for m in cfg.get("fit", "methods").split(",") if m.strip()]
    unknown = set(methods) - {"stica", "tica", "dual"}
    if unknown:
        raise BadConfig(f"unknown fit methods: {sorted(unknown)}")
    mode = cfg.get("fit", "mode")
    tol = cfg.getfloat("fit", "tol")
    max_iter = cfg.getint("fit", "max_iter")
    squarem = cfg.getboolean("fit", "squarem")
    seed = cfg.getint("pipeline", "seed")

    mesh_path = os.path.join(tdir, "mesh.txt")
    builder = None
    if "stica" in methods:
        builder = PrecisionBuilder(TriMesh.load_txt(mesh_path))
        if builder.n_data != tpl.n_locations:
            raise BadConfig("mesh data locations do not match the template")

    n_subj = cfg.getint("simulate", "subjects")
    for sdir in _subject_dirs(run_dir, n_subj):
        reduced, image_sd = load_reduced(os.path.join(sdir, "prep"))
        scaled = Template(mean=tpl.mean / image_sd,
                          variance=tpl.variance / image_sd ** 2)
        if "stica" in methods:
            fit = em.fit_stica(reduced, scaled, None, mode=mode, tol=tol,
                               max_iter=max_iter, squarem=squarem,
                               builder=builder)
            save_fit_dir(os.path.join(sdir, "fit_stica"), fit, reduced,
                         image_sd, "stica", mode=mode, seed=seed,
                         mesh_path=os.path.abspath(mesh_path),
                         scaled_template=scaled)
        if "tica" in methods:
            fit = em.fit_tica(reduced, scaled, tol=tol, max_iter=max_iter,
                              squarem=squarem)
            save_fit_dir(os.path.join(sdir, "fit_tica"), fit, reduced,
                         image_sd, "tica", mode=mode, seed=seed)
        if "dual" in methods:
            y = dataio.load_csv(os.path.join(sdir, "y.csv"))
            yc, stats = center_scale(y)
            yc_raw = yc * (stats.image_sd if stats.scaled else 1.0)
            mixing, maps = dual_regression(yc_raw, tpl.mean)
            out = os.path.join(sdir, "fit_dual")
            os.makedirs(out, exist_ok=True)
            for l in range(tpl.n_components):
                dataio.save_csv(os.path.join(out, f"ic_{l + 1}.csv"), maps[l])
            dataio.save_csv(os.path.join(out, "mixing.csv"), mixing)


def _excursion_seed(seed, subject_idx, ic):
    # flat derived seed: excursion_set namespaces its chunks internally
    return (seed * 1009 + subject_idx) * 131 + ic


def _stage_excursions(cfg, run_dir):
    gamma = cfg.getfloat("excursions", "gamma")
    alpha = cfg.getfloat("excursions", "alpha")
    samples = cfg.getint("excursions", "samples")
    direction = cfg.get("excursions", "direction")
    seed = cfg.getint("pipeline", "seed")
    methods = [m.strip() for m in cfg.get("fit", "methods").split(",") if m.strip()]
    n_subj = cfg.getint("simulate", "subjects")

    builder = None
    if "stica" in methods:
        mesh_path = os.path.join(run_dir, "template", "mesh.txt")
        builder = PrecisionBuilder(TriMesh.load_txt(mesh_path))

    for j, sdir in enumerate(_subject_dirs(run_dir, n_subj)):
        if "stica" in methods:
            fit_dir = os.path.join(sdir, "fit_stica")
            moments, params = rebuild_moments(fit_dir, builder=builder)
            scale = params["scale"]
            n_comp = params["n_components"]
            n_loc = moments.d.shape[1]
            mu = moments.mu.reshape(n_comp, n_loc)
            out = os.path.join(sdir, "masks", "stica")
            os.makedirs(out, exist_ok=True)
            rows = []
            for l in range(n_comp):
                res = inference.excursion_set(
                    mu[l], moments, l, gamma / scale, alpha,
                    direction=direction, n_samples=samples,
                    seed=_excursion_seed(seed, j, l))
                dataio.save_mask(os.path.join(out, f"mask_{l + 1}.csv"),
                                 res.mask)
                rows.append([l + 1, gamma, alpha, res.attained_joint_prob,
                             res.n_samples])
            dataio.write_table(os.path.join(out, "info.csv"),
                               ["ic", "gamma", "alpha", "attained_joint_prob",
                                "n_samples"], rows)
        if "tica" in methods:
            fit_dir = os.path.join(sdir, "fit_tica")
            params = _load_json(os.path.join(fit_dir, "model", "params.json"))
            n_comp = params["n_components"]
            ics = np.stack([
                dataio.load_csv(os.path.join(fit_dir, f"ic_{l + 1}.csv"))
                for l in range(n_comp)])
            sd = np.stack([
                dataio.load_csv(os.path.join(fit_dir, f"sd_{l + 1}.csv"))
                for l in range(n_comp)])
            fit = em.FitResult(params=None, subject_ics=ics,
                               subject_effects=None, marginal_sd=sd,
                               trace=None, iterations=0, wall_seconds=0.0,
                               converged=True)
            masks = inference.ttest_engagement(fit, gamma, alpha=alpha,
                                               direction=direction)
            out = os.path.join(sdir, "masks", "tica")
            os.makedirs(out, exist_ok=True)
            for l in range(n_comp):
                dataio.save_mask(os.path.join(out, f"mask_{l + 1}.csv"),
                                 masks[l])


def _load_subject_maps(sdir, prefix, n_comp):
    return np.stack([
        dataio.load_csv(os.path.join(sdir, f"{prefix}_{l + 1}.csv"))
        for l in range(n_comp)])


def _stage_evaluate(cfg, run_dir):
    tdir = os.path.join(run_dir, "template")
    meta = _load_json(os.path.join(tdir, "meta.json"))
    dims = tuple(meta["dims"])
    n_comp = meta["components"]
    n_subj = cfg.getint("simulate", "subjects")
    methods = [m.strip() for m in cfg.get("fit", "methods").split(",") if m.strip()]
    gamma = cfg.getfloat("excursions", "gamma")
    cat_threshold = cfg.getfloat("evaluate", "cat_threshold")
    want_oracle = cfg.getboolean("evaluate", "oracle_fc")

    sdirs = _subject_dirs(run_dir, n_subj)
    truths = np.stack([_load_subject_maps(s, "truth_ic", n_comp)
                       for s in sdirs])
    true_masks = truths > gamma
    fc_true = np.stack([
        inference.fc_matrix(dataio.load_csv(
            os.path.join(s, "truth_mixing.csv"))) for s in sdirs])

    estimates = {}
    masks = {}
    fc_est = {}
    for method in methods:
        est = np.stack([_load_subject_maps(
            os.path.join(s, f"fit_{method}"), "ic", n_comp) for s in sdirs])
        if method in ("stica", "tica"):
            # jointly estimated maps carry an arbitrary scale factor
            for s in range(n_subj):
                for l in range(n_comp):
                    est[s, l] = metrics.rescale_to_truth(est[s, l],
                                                         truths[s, l])
            mdir = "masks/" + method
            masks[method] = np.stack([
                np.stack([dataio.load_mask(
                    os.path.join(s, mdir, f"mask_{l + 1}.csv"))
                    for l in range(n_comp)]) for s in sdirs])
        estimates[method] = est
        fc_est[method] = np.stack([
            inference.fc_matrix(dataio.load_csv(
                os.path.join(s, f"fit_{method}", "mixing.csv")))
            for s in sdirs])
    if want_oracle:
        fc_or = []
        for s, sdir in enumerate(sdirs):
            y = dataio.load_csv(os.path.join(sdir, "y.csv"))
            yc, stats = center_scale(y)
            yc = yc * (stats.image_sd if stats.scaled else 1.0)
            fc_or.append(inference.fc_matrix(yc @ np.linalg.pinv(truths[s])))
        fc_est["oracle"] = np.stack(fc_or)

    reports = {}
    for method in methods:
        reports[method] = metrics.evaluate(
            estimates[method], truths, masks=masks.get(method),
            true_masks=(true_masks if method in masks else None),
            fc_est=fc_est[method], fc_true=fc_true,
            cat_threshold=cat_threshold)

    out = os.path.join(run_dir, "evaluate")
    os.makedirs(out, exist_ok=True)
    rows = []
    for method in methods:
        r = reports[method]
        for s in range(n_subj):
            for l in range(n_comp):
                has_masks = r.fpr is not None
                rows.append([
                    s + 1, l + 1, method, r.mse[s, l], r.corr[s, l],
                    r.corr_z[s, l], r.cat[s, l], r.cat_z[s, l],
                    r.fpr[s, l] if has_masks else None,
                    r.power[s, l] if has_masks else None,
                    r.dice[s, l] if has_masks else None,
                    int(r.overlap[s, l]) if has_masks else None,
                ])
    dataio.write_table(
        os.path.join(out, "ic_metrics.csv"),
        ["subject", "ic", "method", "mse", "corr", "corr_z", "cat", "cat_z",
         "fpr", "power", "dice", "overlap"], rows)

    fc_rows = []
    fc_mse_by_method = {}
    for method in methods:
        fc_mse_by_method[method] = reports[method].fc_mse
    if want_oracle:
        fc_mse_by_method["oracle"] = ((fc_est["oracle"] - fc_true) ** 2
                                      ).mean(axis=0)
    for method, mat in fc_mse_by_method.items():
        for a in range(n_comp):
            for b in range(a + 1, n_comp):
                fc_rows.append([method, a + 1, b + 1, mat[a, b]])
    dataio.write_table(os.path.join(out, "fc_metrics.csv"),
                       ["method", "ic_a", "ic_b", "fc_mse"], fc_rows)

    summary = []
    for method in methods:
        r = reports[method]
        for l in range(n_comp):
            summary.append([
                method, l + 1, r.mse[:, l].mean(), r.corr_z[:, l].mean(),
                r.cat_z[:, l].mean(),
                r.fpr[:, l].mean() if r.fpr is not None else None,
                r.power[:, l].mean() if r.power is not None else None,
                r.dice[:, l].mean() if r.dice is not None else None,
            ])
    dataio.write_table(
        os.path.join(out, "summary.csv"),
        ["method", "ic", "mean_mse", "mean_corr_z", "mean_cat_z", "mean_fpr",
         "mean_power", "mean_dice"], summary)

    if cfg.getboolean("evaluate", "heatmaps"):
        hdir = os.path.join(out, "heatmaps")
        os.makedirs(hdir, exist_ok=True)
        for l in range(n_comp):
            top = max(reports[m].mse_map[l].max() for m in methods)
            top = max(top, 1e-12)
            for method in methods:
                metrics.emit_heatmap(
                    reports[method].mse_map[l], dims, (0.0, top),
                    os.path.join(hdir, f"mse_{method}_ic{l + 1}.pgm"))

    if cfg.getboolean("evaluate", "figures"):
        _render_figures(out, dims, n_comp, methods, sdirs, truths, estimates,
                        reports, fc_mse_by_method)


def _render_figures(out, dims, n_comp, methods, sdirs, truths, estimates,
                    reports, fc_mse_by_method):
    fdir = os.path.join(out, "figures")
    os.makedirs(fdir, exist_ok=True)
    col_labels = [f"component {l + 1}" for l in range(n_comp)]
    grid = np.stack([truths[0]] + [estimates[m][0] for m in methods])
    figures.map_grid(os.path.join(fdir, "maps_subject1.png"), grid, dims,
                     ["truth"] + methods, col_labels)
    mse_grid = np.stack([reports[m].mse_map for m in methods])
    figures.map_grid(os.path.join(fdir, "mse_maps.png"), mse_grid, dims,
                     methods, col_labels, cmap="magma")
    figures.metric_boxplots(os.path.join(fdir, "correlation.png"),
                            {m: reports[m].corr_z for m in methods},
                            "correlation (Fisher z)")
    figures.metric_boxplots(os.path.join(fdir, "cat.png"),
                            {m: reports[m].cat_z for m in methods},
                            "high-signal correlation (Fisher z)")
    masked = {m: reports[m] for m in methods if reports[m].fpr is not None}
    if masked:
        figures.rate_bars(os.path.join(fdir, "fpr.png"),
                          {m: r.fpr for m, r in masked.items()},
                          "false positive rate", hline=0.1)
        figures.rate_bars(os.path.join(fdir, "power.png"),
                          {m: r.power for m, r in masked.items()}, "power")
    figures.fc_error_bars(os.path.join(fdir, "fc_mse.png"), fc_mse_by_method)
    if "stica" in methods:
        traces = {}
        for j, sdir in enumerate(sdirs):
            path = os.path.join(sdir, "fit_stica", "trace.csv")
            if os.path.exists(path):
                traces[f"subject {j + 1}"] = dataio.load_csv(path)
        if traces:
            figures.trace_plot(os.path.join(fdir, "trace_stica.png"), traces)


_STAGES = {
    "template": _stage_template,
    "simulate": _stage_simulate,
    "preprocess": _stage_preprocess,
    "fit": _stage_fit,
    "excursions": _stage_excursions,
    "evaluate": _stage_evaluate,
}


def run_pipeline(config_path=None, out_dir=None, overrides=(), config=None,
                 log=None):
    """Execute the configured stages in order into a run directory.

    Returns (0, run_dir) on success; raises StageError naming the failed
    stage otherwise. The manifest is written either way. `config` may be
    a preloaded ConfigParser, in which case config_path is ignored.
    """
    cfg = config if config is not None else load_config(config_path,
                                                        overrides)
    run_dir = out_dir or cfg.get("pipeline", "out", fallback=None)
    if not run_dir:
        raise BadConfig("no output directory: set [pipeline] out or --out")
    run_dir = os.path.abspath(run_dir)
    os.makedirs(run_dir, exist_ok=True)

    stages = [s.strip() for s in cfg.get("pipeline", "stages").split(",")
              if s.strip()]
    unknown = [s for s in stages if s not in _STAGES]
    if unknown:
        raise BadConfig(f"unknown stages: {unknown}")
    order = sorted(stages, key=STAGE_ORDER.index)

    with open(os.path.join(run_dir, "config.ini"), "w") as fh:
        cfg.write(fh)
    import matplotlib
    import numba
    import scipy
    manifest = {
        "package_version": __version__,
        "python": sys.version.split()[0],
        "dependencies": {"numpy": np.__version__,
                         "scipy": scipy.__version__,
                         "numba": numba.__version__,
                         "matplotlib": matplotlib.__version__},
        "seed": cfg.getint("pipeline", "seed"),
        "config": {s: dict(cfg[s]) for s in cfg.sections()},
        "stages": [],
        "error": None,
    }
    say = log or (lambda msg: print(msg, file=sys.stderr))
    try:
        for name in order:
            say(f"[{name}] running")
            t0 = time.monotonic()
            try:
                _STAGES[name](cfg, run_dir)
            except Exception as exc:
                manifest["error"] = {"stage": name, "message": str(exc)}
                raise StageError(name, exc) from exc
            wall = time.monotonic() - t0
            manifest["stages"].append({"name": name,
                                       "wall_seconds": round(wall, 3)})
            say(f"[{name}] done in {wall:.1f}s")
    finally:
        _save_json(os.path.join(run_dir, "manifest.json"), manifest)
    return 0, run_dir
