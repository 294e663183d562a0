"""Command-line interface.

Subcommands: ``fit``, ``compare``, ``predict``, ``weights-demo``, ``es``,
``diagnose`` and ``simulate``.  Model settings come from a flat key-value
file given with ``--spec`` (``key = value`` lines, optional ``[section]``
headers are ignored); command-line flags override it.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import os
import sys
from dataclasses import fields

import numpy as np

from . import artifacts
from .bnp_model import PREDICTIVE_WINDOW, SAMPLING_WINDOW, component_weights, fit_bnp, mixture_weights, window_bounds
from .core_data import MetaDataset, Schema, StandardizationInfo, dataset_to_csv, load_dataset, standardize_covariates
from .diagnostics import anderson_darling, count_modes, gaussian_kde, moment_summary
from .draws import MCMCConfig, PosteriorDraws
from .effect_sizes import COLUMNS, FUNCTIONS
from .errors import BNPMetaError, DatasetMismatchError, DomainError, InsufficientDataError
from .model_eval import (SyntheticSpec, compare, d_criterion, generate_synthetic, mc_diagnostics,
                         posterior_predictive_density, X0_VARIANCE)
from .normal_models import NORMAL_KINDS, NormalModelSpec, PriorConfig, fit_normal

EXIT_OK, EXIT_ERROR, EXIT_UNSTABLE = 0, 1, 3
DEFAULT_KEEP = 200_000
DEFAULT_BURN = 2000

_PRIOR_FIELDS = {f.name: f.type for f in fields(PriorConfig)}
_SCHEMA_KEYS = ("y", "var", "study", "report", "covariates", "exclude", "delimiter")


# --- configuration ------------------------------------------------------------

def read_config(path: str | None) -> dict:
    """Flat ``key = value`` settings; section headers only group lines."""
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text if text.lstrip().startswith("[") else "[run]\n" + text)
    except configparser.Error as exc:
        raise DomainError(f"cannot parse {path}: {exc}") from None
    out = {}
    for section in parser.sections():
        out.update(parser[section])
    return out


def _split(value: str) -> list:
    return [v.strip() for v in value.split(",") if v.strip()]


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise DomainError(f"not a boolean: {value!r}")


def priors_from_config(cfg: dict) -> PriorConfig:
    kw = {}
    for key, value in cfg.items():
        if key in _PRIOR_FIELDS:
            kw[key] = value if key == "variance_prior" else float(value)
    return PriorConfig(**kw)


def schema_from_config(cfg: dict) -> Schema:
    kw = {}
    for key in _SCHEMA_KEYS:
        if key in cfg:
            value = cfg[key]
            if key in ("covariates", "exclude"):
                value = tuple(_split(value))
            kw[key] = value
    return Schema(**kw)


def load_data(path: str, cfg: dict) -> tuple[MetaDataset, StandardizationInfo | None]:
    d = load_dataset(path, schema_from_config(cfg))
    info = None
    if d.p and _bool(cfg.get("standardize", "true")):
        d, info = standardize_covariates(d)
    return d, info


def mcmc_from(args, cfg: dict) -> MCMCConfig:
    def pick(name, default):
        v = getattr(args, name, None)
        return int(v) if v is not None else int(cfg.get(name, default))

    return MCMCConfig(burn=pick("burn", DEFAULT_BURN), keep=pick("keep", DEFAULT_KEEP),
                      thin=pick("thin", 1), seed=pick("seed", 0))


# --- fit ---------------------------------------------------------------------------

def run_fit(d: MetaDataset, cfg: dict, mcmc: MCMCConfig, window: float) -> PosteriorDraws:
    kind = cfg.get("model", "FE")
    priors = priors_from_config(cfg)
    mode = cfg.get("covariate_mode", "spike-slab" if kind == "BNP" else "none")
    if kind == "BNP":
        return fit_bnp(d, priors, mcmc, window=window, covariate_mode=mode)
    if kind not in NORMAL_KINDS:
        raise DomainError(f"unknown model {kind!r}")
    spec = NormalModelSpec(kind=kind, grouping=cfg.get("grouping", "by-report"), covariate_mode=mode, priors=priors)
    return fit_normal(spec, d, mcmc)


def scalar_traces(draws: PosteriorDraws, names) -> dict:
    p = draws.params
    coef = ["(intercept)", *names]
    out = {}
    for k, c in enumerate(draws.columns):
        out[f"beta[{coef[c]}]"] = p["beta"][:, k]
    if draws.kind == "BNP":
        for k, c in enumerate(draws.columns):
            out[f"beta_omega[{coef[c]}]"] = p["beta_omega"][:, k]
        for name in ("phi", "sigma0_sq", "sigma_omega", "n_occupied"):
            out[name] = p[name].astype(float)
    else:
        if draws.kind != "FE":
            out["sigma0_sq"] = p["sigma0_sq"]
        if draws.kind == "RE3L":
            out["sigma00_sq"] = p["sigma00_sq"]
        if draws.kind == "RE2L-dep":
            out["psi"] = p["psi"]
    return out


def summarize(draws: PosteriorDraws, names) -> dict:
    params, diag = {}, {}
    for name, x in scalar_traces(draws, names).items():
        lo, hi = np.percentile(x, [2.5, 97.5])
        params[name] = {"mean": float(x.mean()), "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
                        "q2.5": float(lo), "median": float(np.median(x)), "q97.5": float(hi)}
        try:
            mc = mc_diagnostics(x)
            diag[name] = {"mcse": mc.mcse, "halfwidth95": mc.halfwidth95, "stabilized": mc.stabilized}
        except InsufficientDataError as exc:
            diag[name] = {"mcse": None, "halfwidth95": None, "stabilized": False, "note": str(exc)}
    body = {"parameters": params, "diagnostics": diag}
    g = draws.params["gamma"]
    if g.shape[1]:
        coef = ["(intercept)", *names]
        body["inclusion_probabilities"] = {
            coef[c]: float(g[:, k].mean()) for k, c in enumerate(draws.columns[1:])
        }
        body["selected"] = [k for k, v in body["inclusion_probabilities"].items() if v >= 0.5]
    return body


def cmd_fit(args) -> int:
    cfg = read_config(args.spec)
    d, info = load_data(args.data, cfg)
    mcmc = mcmc_from(args, cfg)
    window = float(args.window if args.window is not None else cfg.get("window", SAMPLING_WINDOW))
    config = {"command": "fit", "spec": cfg, "mcmc": mcmc.__dict__, "window": window}
    chash = artifacts.config_hash(config)
    draws = run_fit(d, cfg, mcmc, window)
    draws.meta.update(config_hash=chash, label=cfg.get("label", draws.kind), columns=list(draws.columns),
                      covariate_names=list(d.covariate_names),
                      standardization=info.to_dict() if info else None, spec=cfg)
    # wall-clock time stays out of the draw file so reruns are byte-identical
    run = {k: v for k, v in draws.meta.items() if k != "runtime_sec"}
    meta = artifacts.metadata(chash, mcmc.seed, d.fingerprint(), model=draws.kind, run=run)
    body = summarize(draws, d.covariate_names)
    body["runtime_sec"] = draws.meta["runtime_sec"]
    out = args.out
    artifacts.write_atomic(os.path.join(out, "draws.csv"), artifacts.draws_to_text(draws, meta, d.covariate_names))
    artifacts.write_json(os.path.join(out, "summary.json"), meta, body)
    unstable = [k for k, v in body["diagnostics"].items() if not v["stabilized"]]
    if unstable and not args.allow_unstable:
        print(f"not stabilized (95% MC half-width > .1): {', '.join(unstable)}", file=sys.stderr)
        return EXIT_UNSTABLE
    return EXIT_OK


def load_run(run_dir: str) -> PosteriorDraws:
    with open(os.path.join(run_dir, "draws.csv"), encoding="utf-8") as fh:
        draws, _ = artifacts.draws_from_text(fh.read())
    return draws


# --- compare -----------------------------------------------------------------------

def cmd_compare(args) -> int:
    cfg = read_config(args.spec[0]) if args.spec else {}
    d, _ = load_data(args.data, cfg)
    runs = list(args.runs or [])
    for k, spec_path in enumerate(args.spec or []):
        scfg = read_config(spec_path)
        sub = argparse.Namespace(**vars(args))
        sub.spec = spec_path
        label = scfg.get("label", f"{scfg.get('model', 'FE')}-{k + 1}")
        sub.out = os.path.join(args.out, label)
        sub.allow_unstable = True
        cmd_fit(sub)
        runs.append(sub.out)
    if not runs:
        raise DomainError("give --runs and/or --spec")
    scores = []
    for r in runs:
        draws = load_run(r)
        if draws.meta.get("dataset_hash") != d.fingerprint():
            raise DatasetMismatchError(f"run {r} was fitted on a different dataset")
        s = d_criterion(draws, d, label=draws.meta.get("label", draws.kind))
        s.meta.update(seed=draws.meta.get("seed"), config_hash=draws.meta.get("config_hash"), run=r)
        scores.append(s)
    report = compare(scores)
    chash = artifacts.config_hash({"command": "compare", "runs": [s.meta["config_hash"] for s in report.scores]})
    meta = artifacts.metadata(chash, [s.meta["seed"] for s in report.scores], d.fingerprint())
    artifacts.write_atomic(os.path.join(args.out, "comparison.txt"), artifacts.header_lines(meta) + report.to_text())
    artifacts.write_json(os.path.join(args.out, "comparison.json"), meta, report.to_dict())
    return EXIT_OK


# --- predict -----------------------------------------------------------------------

def _x_vector(draws: PosteriorDraws, assignments) -> np.ndarray:
    names = draws.meta.get("covariate_names", [])
    std = draws.meta.get("standardization")
    info = StandardizationInfo.from_dict(std) if std else None
    x = np.zeros(len(names))
    given = {}
    for a in assignments or []:
        name, _, value = a.partition("=")
        if name not in names:
            raise DomainError(f"unknown covariate {name!r}")
        given[name] = float(value)
    if given and info is not None:
        raw = info.invert(x)
        for name, v in given.items():
            raw[names.index(name)] = v
        x = info.apply(raw)
    else:
        for name, v in given.items():
            x[names.index(name)] = v
    return x


def cmd_predict(args) -> int:
    draws = load_run(args.run)
    chash = artifacts.config_hash({"command": "predict", "run": draws.meta.get("config_hash"), "x": args.x,
                                   "sigma_sq": args.sigma_sq, "sweep": args.sweep, "grid": args.grid_points})
    meta = artifacts.metadata(chash, draws.meta.get("seed"), draws.meta.get("dataset_hash"))
    x = _x_vector(draws, args.x)
    g = posterior_predictive_density(draws, x, args.sigma_sq, grid_points=args.grid_points)
    mom = moment_summary(g)
    gmeta = dict(meta, x=x.tolist(), sigma_sq=args.sigma_sq)
    artifacts.write_atomic(os.path.join(args.out, "density.csv"),
                           artifacts.table_text(gmeta, ["y", "density"], zip(g.y, g.f)))
    body = {"moments": mom._asdict(), "modes": count_modes(g), "integral": g.integral(),
            "quartiles": [float(v) for v in g.quantile([0.25, 0.5, 0.75])]}
    artifacts.write_json(os.path.join(args.out, "density.json"), gmeta, body)
    artifacts.write_atomic(os.path.join(args.out, "density.svg"),
                           artifacts.svg_lines([(g.y, g.f, draws.meta.get("label", draws.kind))], gmeta,
                                               title="posterior predictive density", xlabel="effect size"))
    if args.sweep:
        names = draws.meta.get("covariate_names", [])
        if args.sweep not in names:
            raise DomainError(f"unknown covariate {args.sweep!r}")
        k = names.index(args.sweep)
        std = draws.meta.get("standardization")
        info = StandardizationInfo.from_dict(std) if std else None
        lo, hi = args.sweep_range if args.sweep_range else (-2.0, 2.0)
        values = np.linspace(lo, hi, args.sweep_points)
        rows = []
        for v in values:
            xv = x.copy()
            xv[k] = v
            gv = posterior_predictive_density(draws, xv, args.sigma_sq, grid_points=args.grid_points)
            q = gv.quantile([0.25, 0.5, 0.75])
            raw = float(info.invert(xv)[k]) if info else float(v)
            rows.append((float(v), raw, float(q[1]), float(q[0]), float(q[2])))
        artifacts.write_atomic(os.path.join(args.out, f"sweep_{args.sweep}.csv"),
                               artifacts.table_text(meta, ["x", "x_raw", "median", "q25", "q75"], rows))
        arr = np.array(rows)
        artifacts.write_atomic(os.path.join(args.out, f"sweep_{args.sweep}.svg"),
                               artifacts.svg_lines([(arr[:, 1], arr[:, 2], "median"), (arr[:, 1], arr[:, 3], "q25"),
                                                    (arr[:, 1], arr[:, 4], "q75")], meta,
                                                   title=f"predictive quantiles vs {args.sweep}", xlabel=args.sweep))
    return EXIT_OK


# --- weights demo ------------------------------------------------------------

def cmd_weights_demo(args) -> int:
    sigmas = [float(v) for v in _split(args.sigmas)]
    chash = artifacts.config_hash({"command": "weights-demo", "eta": args.eta, "sigmas": sigmas,
                                   "window": args.window})
    meta = artifacts.metadata(chash, args.seed, None, eta=args.eta)
    window = args.window if args.window is not None else PREDICTIVE_WINDOW
    rng = np.random.default_rng(args.seed)
    lo, hi = window_bounds(args.eta, max(sigmas), window)
    js = np.arange(lo, hi + 1)
    # component means and variances from a normal-gamma draw per index
    tau = rng.gamma(5.0, 1.0, js.size)
    var = 1.0 / tau
    mu = rng.standard_normal(js.size) * np.sqrt(10.0 * var)
    grid = np.linspace(mu.min() - 3, mu.max() + 3, args.grid_points)
    weight_rows, dens_series, summary = [], [], {}
    for s in sigmas:
        w = component_weights(js, args.eta, s)
        weight_rows += [(s, int(j), float(wj)) for j, wj in zip(js, w)]
        f = (w[:, None] * np.exp(-0.5 * (grid[None, :] - mu[:, None]) ** 2 / var[:, None])
             / np.sqrt(2 * np.pi * var[:, None])).sum(axis=0)
        dens_series.append((grid, f, f"sigma_omega={s:g}"))
        summary[f"{s:g}"] = {"weights_above_.05": int(np.sum(w > 0.05)), "max_weight": float(w.max()),
                             "total": float(w.sum()), "window_total": float(sum(mixture_weights(args.eta, s, window).values()))}
    artifacts.write_atomic(os.path.join(args.out, "weights.csv"),
                           artifacts.table_text(meta, ["sigma_omega", "j", "weight"], weight_rows))
    rows = zip(grid, *[f for _, f, _ in dens_series])
    artifacts.write_atomic(os.path.join(args.out, "density.csv"),
                           artifacts.table_text(meta, ["y", *[f"sigma_omega={s:g}" for s in sigmas]], rows))
    comps = [(int(j), float(m), float(v)) for j, m, v in zip(js, mu, var)]
    artifacts.write_json(os.path.join(args.out, "weights.json"), meta, {"summary": summary, "components": comps})
    artifacts.write_atomic(os.path.join(args.out, "density.svg"),
                           artifacts.svg_lines(dens_series, meta, title=f"mixture density, eta={args.eta:g}",
                                               xlabel="y"))
    return EXIT_OK


# --- effect sizes, diagnostics, simulation ------------------------------------

def cmd_es(args) -> int:
    need = COLUMNS[args.type]
    with open(args.data, newline="", encoding="utf-8-sig") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    if not rows:
        raise DomainError("no data rows")
    missing = [c for c in need if c not in rows[0]]
    if missing:
        raise DomainError(f"missing column(s): {', '.join(missing)}")
    fn = FUNCTIONS[args.type]
    extra = [c for c in rows[0] if c not in need]
    out_rows = []
    for r, row in enumerate(rows, start=1):
        try:
            vals = [float(row[c]) for c in need]
        except ValueError:
            raise DomainError(f"row {r}: non-numeric input") from None
        try:
            res = fn(*vals, literature_variant=args.literature_variant) if args.type in ("hedges", "fisher") else fn(*vals)
        except ValueError as exc:
            raise type(exc)(f"row {r}: {exc}") from None
        out_rows.append([row[c] for c in extra] + [res.es, res.var])
    with open(args.data, "rb") as fh:
        dhash = hashlib.sha256(fh.read()).hexdigest()
    chash = artifacts.config_hash({"command": "es", "type": args.type, "variant": args.literature_variant})
    meta = artifacts.metadata(chash, None, dhash, statistic=args.type)
    artifacts.write_atomic(args.out, artifacts.table_text(meta, extra + ["y", "var"], out_rows))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = read_config(args.spec)
    d = load_dataset(args.data, schema_from_config(cfg))
    y = d.y
    chash = artifacts.config_hash({"command": "diagnose", "grid": args.grid_points, "bandwidth": args.bandwidth})
    meta = artifacts.metadata(chash, None, d.fingerprint())
    ad = anderson_darling(y)
    g = gaussian_kde(y, args.bandwidth, args.grid_points)
    body = {"anderson_darling": ad._asdict(), "moments": moment_summary(y)._asdict(),
            "kde_modes": count_modes(g), "bandwidth": g.metadata["bandwidth"], "n": d.n}
    artifacts.write_json(os.path.join(args.out, "diagnose.json"), meta, body)
    artifacts.write_atomic(os.path.join(args.out, "kde.csv"), artifacts.table_text(meta, ["y", "density"], zip(g.y, g.f)))
    artifacts.write_atomic(os.path.join(args.out, "kde.svg"),
                           artifacts.svg_lines([(g.y, g.f, "kde")], meta, title="kernel density of effect sizes",
                                               xlabel="effect size"))
    return EXIT_OK


_SIM_FLOATS = ("sigma0_sq", "sigma00_sq", "psi", "var_low", "var_high", "intercept_var", "mix_prob",
               "sharpness", "sigma_omega")


def simulate_spec_from_config(cfg: dict, kind: str | None) -> SyntheticSpec:
    kw = {}
    for key in _SIM_FLOATS:
        if key in cfg:
            kw[key] = float(cfg[key])
    for key in ("beta", "intercepts", "beta_omega"):
        if key in cfg:
            kw[key] = tuple(float(v) for v in _split(cfg[key]))
    for key in ("n_studies", "min_label"):
        if key in cfg:
            kw[key] = int(cfg[key])
    if "membership" in cfg:
        kw["membership"] = cfg["membership"]
    kw["kind"] = kind or cfg.get("kind", "FE")
    return SyntheticSpec(**kw)


def cmd_simulate(args) -> int:
    cfg = read_config(args.spec)
    spec = simulate_spec_from_config(cfg, args.kind)
    n = args.n if args.n is not None else int(cfg.get("n", 100))
    p = args.p if args.p is not None else int(cfg.get("p", 0))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    d, truth = generate_synthetic(spec, n, p, seed)
    chash = artifacts.config_hash({"command": "simulate", "spec": spec.__dict__, "n": n, "p": p})
    meta = artifacts.metadata(chash, seed, d.fingerprint(), truth={k: v for k, v in truth.items() if k != "labels"})
    artifacts.write_atomic(args.out, artifacts.header_lines(meta) + dataset_to_csv(d))
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bnpmeta", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=artifacts.TOOL)
    sub = ap.add_subparsers(dest="command", required=True)

    def mcmc_flags(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--burn", type=int)
        p.add_argument("--keep", type=int, help=f"retained draws (default {DEFAULT_KEEP})")
        p.add_argument("--thin", type=int)
        p.add_argument("--window", type=float, help=f"label truncation window (default {SAMPLING_WINDOW})")

    p = sub.add_parser("fit", help="fit one model and write draws and a summary")
    p.add_argument("--data", required=True)
    p.add_argument("--spec")
    p.add_argument("--out", required=True)
    p.add_argument("--allow-unstable", action="store_true")
    mcmc_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="rank fitted runs by D(m)")
    p.add_argument("--data", required=True)
    p.add_argument("--runs", nargs="+")
    p.add_argument("--spec", nargs="+", help="model files to fit before comparing")
    p.add_argument("--out", required=True)
    p.add_argument("--allow-unstable", action="store_true")
    mcmc_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("predict", help="posterior predictive density of a fitted run")
    p.add_argument("--run", required=True)
    p.add_argument("--x", nargs="*", metavar="NAME=VALUE", help="covariate values on the original scale")
    p.add_argument("--sigma-sq", type=float, default=X0_VARIANCE)
    p.add_argument("--sweep", help="covariate to sweep (standardized units)")
    p.add_argument("--sweep-range", type=float, nargs=2)
    p.add_argument("--sweep-points", type=int, default=21)
    p.add_argument("--grid-points", type=int, default=512)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("weights-demo", help="mixture weights and densities for several sigma_omega")
    p.add_argument("--eta", type=float, default=0.7)
    p.add_argument("--sigmas", default="0.05,0.5,1,2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=float)
    p.add_argument("--grid-points", type=int, default=512)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_weights_demo)

    p = sub.add_parser("es", help="compute effect sizes and variances from summary statistics")
    p.add_argument("--type", required=True, choices=sorted(COLUMNS))
    p.add_argument("--data", required=True)
    p.add_argument("--literature-variant", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_es)

    p = sub.add_parser("diagnose", help="normality test, KDE and moments of the effect sizes")
    p.add_argument("--data", required=True)
    p.add_argument("--spec")
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--grid-points", type=int, default=512)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--spec")
    p.add_argument("--kind", choices=("FE", "RE2L", "RE2L-dep", "RE3L", "bimodal", "BNP"))
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (BNPMetaError, ValueError, ArithmeticError, OSError, KeyError) as exc:
        print(f"bnpmeta {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
