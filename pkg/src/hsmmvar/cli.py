"""Command-line entry point: ``hsmmvar <command> --config run.yaml``.

Progress goes to standard error; results only to files in the output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, em, scenarios
from .emission import stability_check
from .errors import HSMMVarError, InputError, NonConvergenceError
from .fileio import (
    ResultBundle,
    RunConfig,
    ingest,
    load_model,
    save_model,
    write_dataset,
    write_rows,
    write_table,
)
from .hidden import map_labels, truncation_mass
from .risk import risk_series
from .simboot import SimConfig, parametric_bootstrap, simulate

log = logging.getLogger("hsmmvar")

COMMANDS = ("fit", "select", "simulate", "bootstrap", "risk", "segment")


def _versions():
    import numba
    import scipy
    import sklearn

    return {"hsmmvar": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "scikit-learn": sklearn.__version__}


def _na(v):
    return "NA" if v is None else v


# -- shared emitters -----------------------------------------------------------------

def _state_names(K):
    return [f"state{k + 1}" for k in range(K)]


def _emit_posteriors(bundle, data, post):
    probs = post.state_probs
    time = data.time if data.time is not None else np.arange(1, data.T + 1)
    write_table(bundle.path("posteriors.csv"), _state_names(probs.shape[1]), probs, time, "time")
    labels = map_labels(post) + 1
    write_rows(bundle.path("segmentation.csv"), ["time", "state"],
               [[str(time[t]), int(labels[t])] for t in range(data.T)])
    return labels


def _emit_stability(bundle, params, data):
    rep = stability_check(params.var)
    names = list(data.y_names) or [f"y{i + 1}" for i in range(data.p)]
    rows = [[k + 1, float(rep.radius[k]), int(bool(rep.stable[k]))] + [float(v) for v in rep.marginal_mean[k]]
            for k in range(params.K)]
    write_rows(bundle.path("stability.csv"), ["state", "spectral_radius", "stable"] + [f"mean_{n}" for n in names], rows)
    return [{"state": k + 1, "spectral_radius": float(rep.radius[k]), "stable": bool(rep.stable[k])}
            for k in range(params.K)]


def _emit_fit(bundle, data, res, manifest, prefix=""):
    params = res.params
    save_model(bundle.path("model.json"), params, lambda0=res.lambda0, icl=res.icl, loglik=res.loglik,
               converged=res.converged, iterations=res.iterations, df=res.df, seed=res.seed,
               y_names=list(data.y_names), x_names=list(data.x_names), z_names=list(data.z_names))
    names, vals = em.param_vector(params)
    write_rows(bundle.path("parameters.csv"), ["parameter", "value"], [[n, float(v)] for n, v in zip(names, vals)])
    if res.loglik_trace:
        write_table(bundle.path("loglik.csv"), ["loglik"], np.array(res.loglik_trace)[:, None],
                    np.arange(len(res.loglik_trace)), "iteration")
    post = res.posteriors if res.posteriors is not None else em.e_step(data, params)
    _emit_posteriors(bundle, data, post)
    manifest["fit"] = {
        "K": params.K, "lambda0": res.lambda0, "icl": res.icl, "loglik": res.loglik, "df": res.df,
        "iterations": res.iterations, "converged": res.converged, "seed": res.seed,
        "truncation_mass": [float(v) for v in truncation_mass(post)],
        "stability": _emit_stability(bundle, params, data),
    }


def _dims(data, cfg):
    return {"T": data.T, "p": data.p, "J": data.J, "L": data.L,
            "H": int(cfg["model"]["H"]), "m": int(cfg["model"]["m"])}


def _load_data(cfg):
    path = cfg["data"]["path"]
    if path is None:
        raise InputError("data.path is required for this command")
    return ingest(path, cfg)


def _load_fitted(cfg, args, data):
    path = args.model or cfg["model"]["file"]
    if path is None:
        raise InputError("this command needs a fitted model: pass --model or set model.file")
    params, doc = load_model(cfg.resolve(path) if args.model is None else Path(path))
    d = params.dims
    if (d["p"], d["J"], d["L"]) != (data.p, data.J, data.L):
        raise InputError(f"model dims {d} do not match the data (p={data.p}, J={data.J}, L={data.L})")
    return params, doc


def _fit_from_model(data, params, doc):
    post = em.e_step(data, params)
    res = em.FitResult(params, post, [post.loglik], np.nan, int(doc.get("iterations", 0)),
                       bool(doc.get("converged", True)), float(doc.get("lambda0", 0.0)),
                       seed=doc.get("seed"))
    res.df = em.degrees_of_freedom(params)
    res.icl = float(em.icl(res, data))
    return res


# -- commands -------------------------------------------------------------------------

def cmd_fit(cfg, bundle, manifest, args):
    data = _load_data(cfg)
    manifest["dims"] = _dims(data, cfg)
    if len(cfg.K_list) != 1:
        raise InputError("fit needs a single model.K; use select for a grid")
    mc = cfg["model"]
    lam = mc["lambda0"] if mc["lambda0"] is not None else 0.0
    best = None
    for seed in cfg.seeds:
        log.info("fitting K=%d lambda0=%g seed=%d", cfg.K_list[0], lam, seed)
        res = em.fit(data, cfg.K_list[0], float(lam), seed, int(mc["H"]), int(mc["m"]), mc["link"],
                     int(mc["max_iter"]), init_method=mc["init"])
        if best is None or res.icl < best.icl:
            best = res
    _emit_fit(bundle, data, best, manifest)
    if not best.converged:
        raise NonConvergenceError(f"EM did not converge in {best.iterations} iterations; partial results written")
    return 0


def _grid_rows(gs):
    return [[c["K"], float(c["lambda0"]), _na(c["icl"]), _na(c["loglik"]), _na(c["df"]), _na(c["iterations"]),
             _na(None if c["converged"] is None else int(c["converged"])), _na(c["seed"]), _na(c["error"])]
            for c in gs.cells]


def cmd_select(cfg, bundle, manifest, args):
    data = _load_data(cfg)
    manifest["dims"] = _dims(data, cfg)
    mc = cfg["model"]
    log.info("grid over K=%s and %d penalties", cfg.K_list, len(cfg.lambda_list))
    gs = em.grid_select(data, cfg.K_list, cfg.lambda_list, cfg.seeds, int(mc["H"]), int(mc["m"]), mc["link"],
                        int(mc["max_iter"]), mc["init"])
    write_rows(bundle.path("icl.csv"),
               ["K", "lambda0", "icl", "loglik", "df", "iterations", "converged", "seed", "error"], _grid_rows(gs))
    sel = gs.selected
    manifest["selection"] = {"K": sel.params.K, "lambda0": sel.lambda0, "icl": sel.icl}
    _emit_fit(bundle, data, sel, manifest)
    if not sel.converged:
        raise NonConvergenceError("no grid cell converged; the best non-converged fit was written")
    return 0


def _scenario(cfg):
    sc = cfg["simulate"]
    if sc["truth"] is not None:
        params, _ = load_model(cfg.resolve(sc["truth"]))
        T = sc["T"]
        if T is None:
            raise InputError("simulate.T is required with a custom truth")
        return params, int(T), None, None, None, ()
    name = sc["scenario"]
    seed = int(sc["seed"])
    if name.startswith("simulation-"):
        K = int(name.split("-", 1)[1])
        T = int(sc["T"] or scenarios.SIMULATION_T)
        x, z = scenarios.simulation_covariates(T, seed)
        return scenarios.simulation(K), T, x, z, None, ()
    if name == "application":
        T = int(sc["T"] or scenarios.APP_T)
        dates, x, z = scenarios.application_covariates(T, seed)
        return scenarios.application_like(), T, x, z, dates, scenarios.APP_NAMES
    raise InputError(f"unknown scenario {name!r}; expected simulation-2|3|4 or application")


def cmd_simulate(cfg, bundle, manifest, args):
    params, T, x, z, time, names = _scenario(cfg)
    seed = int(cfg["simulate"]["seed"])
    data, states, dwell = simulate(SimConfig(params, T, seed, x, z, time, names))
    xn = ("temperature", "weekend") if cfg["simulate"]["scenario"] == "application" else ()
    zn = ("wind", "precipitation") if cfg["simulate"]["scenario"] == "application" else ()
    from .data import Dataset

    data = Dataset(data.y, data.x, data.z, data.time, data.y_names, xn, zn)
    roles = write_dataset(bundle.path("data.csv"), data)
    tcol = data.time if data.time is not None else np.arange(1, T + 1)
    write_rows(bundle.path("states.csv"), ["time", "state", "dwell"],
               [[str(tcol[t]), int(states[t]) + 1, int(dwell[t])] for t in range(T)])
    save_model(bundle.path("truth.json"), params)
    manifest["dims"] = {"T": T, **params.dims}
    manifest["roles"] = roles
    return 0


def cmd_bootstrap(cfg, bundle, manifest, args):
    data = _load_data(cfg)
    manifest["dims"] = _dims(data, cfg)
    params, doc = _load_fitted(cfg, args, data)
    if not doc.get("converged", True):
        raise InputError("bootstrap needs a converged fit")
    fitted = _fit_from_model(data, params, doc)
    bc, mc = cfg["bootstrap"], cfg["model"]
    if bc["K"] is None:
        K_list = cfg.K_list
    elif bc["K"] == "selected":
        K_list = [params.K]
    else:
        K_list = [int(bc["K"])] if np.isscalar(bc["K"]) else [int(k) for k in bc["K"]]
    from .fileio import _as_grid

    lam = cfg.lambda_list if bc["lambda_grid"] is None else _as_grid(bc["lambda_grid"])
    B = int(bc["B"])
    log.info("bootstrap with B=%d over K=%s and %d penalties", B, K_list, len(lam))
    res = parametric_bootstrap(data, fitted, B, K_list, lam, cfg.seeds, int(bc["seed"]), float(bc["level"]),
                               int(mc["max_iter"]), mc["init"])
    write_rows(bundle.path("bootstrap.csv"), ["parameter", "point", "mean", "lower", "upper", "selection"],
               [[n, float(a), float(b), float(c), float(d), "NA" if np.isnan(e) else float(e)]
                for n, a, b, c, d, e in res.table()])
    write_rows(bundle.path("replicas.csv"), ["replica", "K", "lambda0"],
               [[i + 1, k, float(l)] for i, (k, l) in enumerate(zip(res.selected_K, res.selected_lambda))])
    if res.estimates.shape[0]:
        write_table(bundle.path("estimates.csv"), res.names, res.estimates,
                    np.arange(1, res.estimates.shape[0] + 1), "replica")
    save_model(bundle.path("debiased.json"), res.debiased, lambda0=fitted.lambda0)
    manifest["bootstrap"] = {"B": B, "K_grid": K_list, "lambda_grid": lam, "level": res.level,
                             "aligned_replicas": int(res.estimates.shape[0]), "failures": res.failures,
                             "selected_K_counts": {str(k): res.selected_K.count(k) for k in sorted(set(res.selected_K))}}
    return 0


def cmd_risk(cfg, bundle, manifest, args):
    data = _load_data(cfg)
    manifest["dims"] = _dims(data, cfg)
    params, _ = _load_fitted(cfg, args, data)
    rc = cfg["risk"]
    log.info("risk series with tau=%g tau_star=%g measure=%s", rc["tau"], rc["tau_star"], rc["measure"])
    rep = risk_series(data, params, float(rc["tau"]), float(rc["tau_star"]), rc["measure"])
    names = list(data.y_names) or [f"y{i + 1}" for i in range(data.p)]
    time = data.time if data.time is not None else np.arange(1, data.T + 1)
    write_table(bundle.path("risk.csv"), rep.columns(names), rep.matrix(), time[rep.times], "time")
    write_table(bundle.path("filtering.csv"), _state_names(params.K), rep.psi, time[rep.times], "time")
    manifest["risk"] = {"rows": int(rep.times.size), "tau": rep.tau, "tau_star": rep.tau_star, "measure": rep.measure}
    return 0


def cmd_segment(cfg, bundle, manifest, args):
    data = _load_data(cfg)
    manifest["dims"] = _dims(data, cfg)
    params, _ = _load_fitted(cfg, args, data)
    post = em.e_step(data, params)
    labels = _emit_posteriors(bundle, data, post)
    manifest["segment"] = {"rows": int(labels.size), "loglik": post.loglik,
                           "counts": {str(k + 1): int(np.sum(labels == k + 1)) for k in range(params.K)}}
    return 0


_DISPATCH = {"fit": cmd_fit, "select": cmd_select, "simulate": cmd_simulate,
             "bootstrap": cmd_bootstrap, "risk": cmd_risk, "segment": cmd_segment}


def build_parser():
    ap = argparse.ArgumentParser(prog="hsmmvar", description="Hidden semi-Markov VAR models from the command line.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override every seed in the configuration")
        sp.add_argument("--threads", type=int, help="parallelism hint (outputs never depend on it)")
        sp.add_argument("--out", help="output directory (default: config 'out')")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        sp.add_argument("--model", help="fitted model.json (bootstrap, risk, segment)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def _apply_seed(cfg, seed):
    if seed is None:
        return
    cfg.raw["seeds"] = [seed]
    cfg.raw["simulate"]["seed"] = seed
    cfg.raw["bootstrap"]["seed"] = seed


def _error_record(exc):
    return {"type": type(exc).__name__, "message": str(exc), "exit_code": getattr(exc, "exit_code", 1)}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        echoed = json.loads(json.dumps(cfg.raw))
        _apply_seed(cfg, args.seed)
        out = Path(args.out) if args.out else cfg.resolve(cfg["out"])
        bundle = ResultBundle(out, force=args.force)
    except HSMMVarError as exc:
        print(json.dumps({"status": "error", "error": _error_record(exc)}), file=sys.stderr)
        return exc.exit_code
    if args.threads:
        log.debug("threads hint %d ignored: kernels are sequential", args.threads)
    manifest = {"command": args.command, "versions": _versions(), "config": echoed,
                "overrides": {"seed": args.seed}, "status": "ok", "error": None}
    try:
        code = _DISPATCH[args.command](cfg, bundle, manifest, args)
    except HSMMVarError as exc:
        log.error("%s", exc)
        manifest["status"] = "partial" if isinstance(exc, NonConvergenceError) else "error"
        manifest["error"] = _error_record(exc)
        code = exc.exit_code
    except Exception as exc:  # unexpected failures still leave a machine-readable record
        log.exception("unexpected failure")
        manifest["status"] = "error"
        manifest["error"] = _error_record(exc)
        code = 1
    manifest["exit_code"] = code
    bundle.write_manifest(manifest)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
