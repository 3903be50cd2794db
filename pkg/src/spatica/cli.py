"""Command-line front end.

Subcommands mirror the pipeline stages so any step can run standalone:
template and simulate generate data, preprocess reduces one subject's
timeseries, fit estimates component maps, excursions turns a fit into an
engagement mask, evaluate scores a finished run, and pipeline executes a
whole config. Flag values override config values; the resolved settings
land in the run's manifest.
"""

import argparse
import os
import sys

from . import dataio, em, inference, pipeline
from .mesh import PrecisionBuilder, TriMesh
from .template import DEFAULT_AMPLITUDE, DEFAULT_CENTERS, DEFAULT_FWHMS, \
    DEFAULT_SMOOTH_FWHM, DEFAULT_VAR_SCALE, Template


def _add_template(sub):
    p = sub.add_parser("template", help="build a population template directory")
    p.add_argument("--dims", default="46x55", help="grid as ROWSxCOLS")
    p.add_argument("--centers", default=None,
                   help="peak centers, e.g. 12x15,35x40,15x40")
    p.add_argument("--fwhms", default=None, help="peak widths, e.g. 30,40,45")
    p.add_argument("--amplitude", type=float, default=DEFAULT_AMPLITUDE)
    p.add_argument("--var-scale", type=float, default=DEFAULT_VAR_SCALE)
    p.add_argument("--smooth-fwhm", type=float, default=DEFAULT_SMOOTH_FWHM)
    p.add_argument("--train", type=int, default=1000,
                   help="Monte Carlo subjects behind the template")
    p.add_argument("--t-len", type=int, default=800)
    p.add_argument("--pool-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="generate test-subject data")
    p.add_argument("--template", default=None,
                   help="existing template directory; built with defaults "
                        "under OUT/template when omitted")
    p.add_argument("--dims", default="46x55",
                   help="grid when building the default template")
    p.add_argument("--centers", default=None,
                   help="peak centers for the default template")
    p.add_argument("--fwhms", default=None,
                   help="peak widths for the default template")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--noise-sd", type=float, default=11.2)
    p.add_argument("--train", type=int, default=1000)
    p.add_argument("--t-len", type=int, default=800)
    p.add_argument("--pool-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)


def _add_preprocess(sub):
    p = sub.add_parser("preprocess", help="reduce one subject's timeseries")
    p.add_argument("--data", required=True, help="T x V CSV of observations")
    p.add_argument("--template", required=True, help="template directory")
    p.add_argument("--L", type=int, default=None,
                   help="components to keep (default: template size)")
    p.add_argument("--nuisance-count", type=int, default=None)
    p.add_argument("--nuisance-iters", type=int, default=0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)


def _add_fit(sub):
    p = sub.add_parser("fit", help="estimate subject component maps")
    p.add_argument("--method", choices=("stica", "tica"), required=True)
    p.add_argument("--data", required=True,
                   help="preprocess output directory")
    p.add_argument("--template", required=True)
    p.add_argument("--mesh", default=None,
                   help="mesh file (spatial method only)")
    p.add_argument("--mode", choices=("common", "per-ic"), default="common")
    p.add_argument("--tol", type=float, default=0.001)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--no-squarem", action="store_true")
    p.add_argument("--seed", type=int, default=42,
                   help="recorded in the fit; estimation is deterministic")
    p.add_argument("--out", required=True)


def _add_excursions(sub):
    p = sub.add_parser("excursions", help="engagement mask from a fit")
    p.add_argument("--fit", required=True, help="fit output directory")
    p.add_argument("--ic", type=int, required=True,
                   help="component number, starting at 1")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--direction", choices=("pos", "neg"), default="pos")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="mask CSV path")


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="score a finished pipeline run")
    p.add_argument("--run", required=True, help="pipeline run directory")
    p.add_argument("--set", action="append", default=[], dest="overrides",
                   metavar="SECTION.KEY=VALUE")


def _add_pipeline(sub):
    p = sub.add_parser("pipeline", help="run configured stages end to end")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--set", action="append", default=[], dest="overrides",
                   metavar="SECTION.KEY=VALUE")


def _cmd_template(args):
    dims = pipeline.parse_dims(args.dims)
    centers = (pipeline.parse_centers(args.centers) if args.centers
               else list(DEFAULT_CENTERS))
    fwhms = (pipeline.parse_floats(args.fwhms) if args.fwhms
             else list(DEFAULT_FWHMS))
    pipeline.build_template_dir(
        args.out, dims, centers, fwhms, args.amplitude, args.var_scale,
        args.smooth_fwhm, args.train, args.seed, args.t_len, args.pool_size)
    print(args.out)
    return 0


def _cmd_simulate(args):
    tdir = args.template
    if tdir is None:
        centers = (pipeline.parse_centers(args.centers) if args.centers
                   else list(DEFAULT_CENTERS))
        fwhms = (pipeline.parse_floats(args.fwhms) if args.fwhms
                 else list(DEFAULT_FWHMS))
        tdir = pipeline.build_template_dir(
            os.path.join(args.out, "template"), pipeline.parse_dims(args.dims),
            centers, fwhms, DEFAULT_AMPLITUDE,
            DEFAULT_VAR_SCALE, DEFAULT_SMOOTH_FWHM, args.train, args.seed,
            args.t_len, args.pool_size)
    pipeline.simulate_subjects(tdir, args.out, args.subjects, args.noise_sd,
                               args.seed)
    print(args.out)
    return 0


def _cmd_preprocess(args):
    tpl = dataio.load_template(args.template)
    n_comp = args.L or tpl.n_components
    y = dataio.load_csv(args.data)
    reduced, image_sd = pipeline.preprocess_one(
        y, tpl, n_comp, nuisance_iters=args.nuisance_iters,
        nuisance_count=args.nuisance_count, rng_seed=[args.seed, 0])
    pipeline.save_reduced(args.out, reduced, image_sd)
    print(args.out)
    return 0


def _cmd_fit(args):
    tpl = dataio.load_template(args.template)
    reduced, image_sd = pipeline.load_reduced(args.data)
    scaled = Template(mean=tpl.mean / image_sd,
                      variance=tpl.variance / image_sd ** 2)
    if args.method == "stica":
        if not args.mesh:
            print("fit: --mesh is required for the spatial method",
                  file=sys.stderr)
            return 2
        builder = PrecisionBuilder(TriMesh.load_txt(args.mesh))
        fit = em.fit_stica(reduced, scaled, None, mode=args.mode,
                           tol=args.tol, max_iter=args.max_iter,
                           squarem=not args.no_squarem, builder=builder)
        pipeline.save_fit_dir(args.out, fit, reduced, image_sd, "stica",
                              mode=args.mode, seed=args.seed,
                              mesh_path=os.path.abspath(args.mesh),
                              scaled_template=scaled)
    else:
        fit = em.fit_tica(reduced, scaled, tol=args.tol,
                          max_iter=args.max_iter,
                          squarem=not args.no_squarem)
        pipeline.save_fit_dir(args.out, fit, reduced, image_sd, "tica",
                              mode=args.mode, seed=args.seed)
    print(args.out)
    return 0


def _cmd_excursions(args):
    direction = "positive" if args.direction == "pos" else "negative"
    model = os.path.join(args.fit, "model")
    params = pipeline._load_json(os.path.join(model, "params.json"))
    ic = args.ic - 1
    if not 0 <= ic < params["n_components"]:
        print(f"excursions: --ic must be in 1..{params['n_components']}",
              file=sys.stderr)
        return 2
    if params["method"] == "stica":
        moments, params = pipeline.rebuild_moments(args.fit)
        scale = params["scale"]
        n_loc = moments.d.shape[1]
        mu = moments.mu.reshape(params["n_components"], n_loc)
        res = inference.excursion_set(
            mu[ic], moments, ic, args.gamma / scale, args.alpha,
            direction=direction, n_samples=args.samples, seed=args.seed)
        dataio.save_mask(args.out, res.mask)
        print(f"{args.out} attained_joint_prob={res.attained_joint_prob:.6f}")
    else:
        ics = dataio.load_csv(os.path.join(args.fit, f"ic_{args.ic}.csv"))
        sd = dataio.load_csv(os.path.join(args.fit, f"sd_{args.ic}.csv"))
        fit = em.FitResult(params=None, subject_ics=ics[None, :],
                           subject_effects=None, marginal_sd=sd[None, :],
                           trace=None, iterations=0, wall_seconds=0.0,
                           converged=True)
        masks = inference.ttest_engagement(fit, args.gamma, alpha=args.alpha,
                                           direction=direction)
        dataio.save_mask(args.out, masks[0])
        print(args.out)
    return 0


def _cmd_evaluate(args):
    cfg_path = os.path.join(args.run, "config.ini")
    if not os.path.exists(cfg_path):
        print(f"evaluate: no config.ini under {args.run}", file=sys.stderr)
        return 2
    cfg = pipeline.load_config(cfg_path, args.overrides)
    pipeline._stage_evaluate(cfg, args.run)
    print(os.path.join(args.run, "evaluate"))
    return 0


def _cmd_pipeline(args):
    try:
        status, run_dir = pipeline.run_pipeline(
            config_path=args.config, out_dir=args.out,
            overrides=args.overrides)
    except pipeline.StageError as exc:
        print(f"pipeline: {exc}", file=sys.stderr)
        return 1
    print(run_dir)
    return status


_COMMANDS = {
    "template": _cmd_template,
    "simulate": _cmd_simulate,
    "preprocess": _cmd_preprocess,
    "fit": _cmd_fit,
    "excursions": _cmd_excursions,
    "evaluate": _cmd_evaluate,
    "pipeline": _cmd_pipeline,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="spatica",
        description="subject-level component estimation with spatial priors")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_template, _add_simulate, _add_preprocess, _add_fit,
                _add_excursions, _add_evaluate, _add_pipeline):
        add(sub)
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except pipeline.BadConfig as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
