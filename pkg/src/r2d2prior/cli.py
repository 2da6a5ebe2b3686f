"""Command-line interface.

Subcommands: density (prior density curves as CSV), fit-gbp (JSON result),
sample (prior draws as CSV), simulate (study tables as CSV) and analyze
(CSV in, trace CSV + posterior summary JSON out). Usage errors exit with
status 2, runtime failures with status 1; all stochastic paths honor
--seed and are reproducible.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from importlib import resources

import numpy as np

from . import __version__
from .approx import QmcConfig, linear_s2, qmc_pdf
from .dataio import CsvSchema, load_csv
from .distributions import GbpParams, gbp_pdf, gbp_sample
from .errors import R2D2Error
from .exact import InducedPrior, induced_pdf, induced_sample
from .families import (
    KINDS,
    POISSON_OFFSET,
    ModelFamily,
    R2PriorSpec,
    default_family,
    r2_bounds,
)
from .gbpfit import FitConfig, estimate_beta0, fit_gbp
from .mcmc import (
    GlmmSpec,
    GroupSpec,
    McmcConfig,
    R2D2Prior,
    SpatialExponential,
    build_model,
    run_chain,
)
from .simulate import STUDIES, StudyConfig, run_study, study_rows_to_csv


def _family_from_args(args) -> ModelFamily:
    kind = args.family
    if kind not in KINDS:
        raise R2D2Error(f"unknown family {kind!r}")
    theta = getattr(args, "theta", None)
    if theta is None:
        return default_family(kind)
    return ModelFamily(kind, theta)


def _spec_for(family: ModelFamily, beta0: float, a: float, b: float) -> R2PriorSpec:
    lo, hi = r2_bounds(family, beta0)
    return R2PriorSpec(a, b, lo, hi)


def _write_csv(path, header, columns):
    data = np.column_stack(columns) if columns and len(columns[0]) else np.empty((0, len(header)))
    out = sys.stdout if path in (None, "-") else open(path, "w")
    try:
        out.write(",".join(header) + "\n")
        for row in data:
            out.write(",".join(f"{v:.12g}" for v in row) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_density(args) -> int:
    family = _family_from_args(args)
    spec = _spec_for(family, args.beta0, args.a, args.b)
    w = np.linspace(0.0, args.w_max, args.points) if args.w_max > 0 else np.empty(0)
    if len(w):
        w = w[w > 0] if args.method != "gbp" else w
    if args.method == "exact":
        prior = InducedPrior(family, args.beta0, spec)
        dens = induced_pdf(prior, w) if len(w) else np.empty(0)
    elif args.method == "qmc":
        cfg = QmcConfig(K=args.qmc_k)
        dens = qmc_pdf(family, args.beta0, spec, cfg, w) if len(w) else np.empty(0)
    elif args.method == "linear":
        p = GbpParams(args.a, args.b, 1.0, linear_s2(family, args.beta0))
        dens = gbp_pdf(w, p) if len(w) else np.empty(0)
    else:  # gbp
        if args.gbp is not None:
            p = GbpParams(*args.gbp)
        else:
            res = fit_gbp(family, args.beta0, spec, FitConfig())
            p = res.params
        dens = gbp_pdf(w, p) if len(w) else np.empty(0)
    _write_csv(args.out, ["w", "density"], [w, np.atleast_1d(dens)] if len(w) else [])
    return 0


def cmd_fit_gbp(args) -> int:
    family = _family_from_args(args)
    spec = _spec_for(family, args.beta0, args.a, args.b)
    cfg = FitConfig(lam=args.lam, qmc=QmcConfig(K=args.qmc_k))
    res = fit_gbp(family, args.beta0, spec, cfg)
    doc = {"a_star": res.params.a, "b_star": res.params.b,
           "c_star": res.params.c, "d_star": res.params.d,
           "divergence": res.divergence, "penalty": res.penalty,
           "ks": res.ks_to_target_r2}
    text = json.dumps(doc, indent=2)
    if args.out in (None, "-"):
        print(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


def cmd_sample(args) -> int:
    family = _family_from_args(args)
    if args.method == "gbp":
        if args.gbp is None:
            raise R2D2Error("--gbp a,b,c,d is required for method gbp")
        draws = gbp_sample(args.n, GbpParams(*args.gbp), args.seed)
    else:
        spec = _spec_for(family, args.beta0, args.a, args.b)
        prior = InducedPrior(family, args.beta0, spec)
        draws = induced_sample(prior, args.n, args.seed)
    _write_csv(args.out, ["w"], [draws])
    return 0


def cmd_simulate(args) -> int:
    mcmc = McmcConfig(iters=args.iters, burn_in=args.burn_in)
    cfg = StudyConfig(study=args.study, reps=args.reps, mcmc=mcmc,
                      holdout_n=args.holdout, seed=args.seed)
    rows, failures = run_study(cfg)
    study_rows_to_csv(rows, args.out if args.out not in (None, "-") else sys.stdout)
    if failures:
        print(f"{len(failures)} replicates failed", file=sys.stderr)
    return 0


def cmd_analyze(args) -> int:
    schema = CsvSchema(
        response=args.response,
        covariates=tuple(args.covariates.split(",")) if args.covariates else (),
        groups=tuple([args.group]) if args.group else (),
        coords=tuple(args.coords.split(",")) if args.coords else None,
        offset=args.offset,
    )
    data = load_csv(args.data, schema)
    family = _family_from_args(args)
    if family.kind == POISSON_OFFSET and data.offset_log_variance is not None:
        family = ModelFamily(POISSON_OFFSET, math.exp(data.offset_log_variance))
    beta0_hat = estimate_beta0(data.y, family)
    spec_r2 = _spec_for(family, beta0_hat, args.a, args.b)
    fit = fit_gbp(family, beta0_hat, spec_r2, FitConfig(qmc=QmcConfig(K=args.qmc_k)))

    groups = ()
    if args.group:
        levels = len(data.label_maps[0])
        if data.coords is not None:
            groups = (GroupSpec(levels, SpatialExponential(data.coords)),)
        else:
            groups = (GroupSpec(levels),)
    spec = GlmmSpec(family, p=data.p, groups=groups,
                    offsets=data.offsets,
                    effect_grouping="shared-block" if args.shared_block else "per-coefficient")
    prior = R2D2Prior(spec_r2, gbp=fit.params)
    model = build_model(spec, prior, data)
    cfg = McmcConfig(iters=args.iters, burn_in=args.burn_in, seed=args.seed)
    samples = run_chain(model, cfg)
    samples.to_csv(f"{args.out_prefix}_trace.csv")

    def stat(x):
        return {"mean": float(np.mean(x)), "sd": float(np.std(x, ddof=1))}

    summary = {
        "beta0_hat": beta0_hat,
        "gbp": {"a_star": fit.params.a, "b_star": fit.params.b,
                "c_star": fit.params.c, "d_star": fit.params.d,
                "ks": fit.ks_to_target_r2},
        "r2n": stat(samples.r2n),
        "W": stat(samples.W),
        "sigma2_u": [stat(samples.sigma2_u[:, k])
                     for k in range(samples.sigma2_u.shape[1])] if samples.sigma2_u is not None else [],
        "rho": stat(samples.rho) if samples.rho is not None else None,
        "draws": len(samples),
        "seed": args.seed,
    }
    with open(f"{args.out_prefix}_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    if args.label_map_out:
        maps = {name: list(labels) for name, labels in
                zip(data.group_names, data.label_maps)}
        with open(args.label_map_out, "w") as fh:
            json.dump(maps, fh, indent=2)
            fh.write("\n")
    return 0


def _gbp_params(text: str):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("expected a,b,c,d")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="r2d2", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add_prior_args(p, beta0=True):
        p.add_argument("--family", required=True, choices=KINDS)
        p.add_argument("--theta", type=float, default=None)
        if beta0:
            p.add_argument("--beta0", type=float, default=0.0)
        p.add_argument("--a", type=float, default=1.0)
        p.add_argument("--b", type=float, default=1.0)

    p = sub.add_parser("density", help="evaluate a prior density on a w grid")
    add_prior_args(p)
    p.add_argument("--method", choices=("exact", "qmc", "linear", "gbp"), default="exact")
    p.add_argument("--gbp", type=_gbp_params, default=None, metavar="a,b,c,d")
    p.add_argument("--w-max", type=float, default=10.0)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--qmc-k", type=int, default=10_000)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("fit-gbp", help="fit GBP parameters to the induced prior")
    add_prior_args(p)
    p.add_argument("--lam", type=float, default=0.25)
    p.add_argument("--qmc-k", type=int, default=10_000)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_fit_gbp)

    p = sub.add_parser("sample", help="draw from an induced or GBP prior")
    add_prior_args(p)
    p.add_argument("--method", choices=("exact", "gbp"), default="exact")
    p.add_argument("--gbp", type=_gbp_params, default=None, metavar="a,b,c,d")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("--study", required=True, choices=STUDIES)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--burn-in", type=int, default=5_000)
    p.add_argument("--holdout", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="fit a GLMM under the fitted prior")
    p.add_argument("--data", required=True)
    p.add_argument("--response", required=True)
    p.add_argument("--covariates", default="")
    p.add_argument("--group", default=None)
    p.add_argument("--coords", default=None, help="x,y column names")
    p.add_argument("--offset", default=None)
    add_prior_args(p, beta0=False)
    p.add_argument("--shared-block", action="store_true",
                   help="one phi share for the whole fixed-effect block")
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--burn-in", type=int, default=5_000)
    p.add_argument("--qmc-k", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", default="analysis")
    p.add_argument("--label-map-out", default=None)
    p.set_defaults(func=cmd_analyze)
    return ap


def get_schema(name: str) -> dict:
    """Load one of the shipped JSON schemas (fit_gbp, analyze_summary)."""
    text = resources.files("r2d2prior").joinpath(f"schemas/{name}.schema.json").read_text()
    return json.loads(text)


def bundled_data_path(name: str):
    """Path to a CSV shipped with the package (gambia_synthetic, tiny_spatial)."""
    return resources.files("r2d2prior").joinpath(f"data/{name}.csv")


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except R2D2Error as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
