"""Command-line entry point: ``bulkcredal <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import worstcase
from .bench import newsvendor as nv
from .bench import regression as rg
from .bench.common import config_from_dict, config_to_dict, emit_results
from .calibrate import calibrate_bulk, eps_c_lower_bound, epsilon_diagnostics, split_fit_select
from .centres import EmpiricalSampler, fit_copula_centre, fit_student_t_gibbs, sampler_to_json
from .checks import run_discrete_checks
from .core import PiecewiseAffineLoss
from .io import bulk_from_dict, bulk_to_dict, load_matrix, load_problem_file
from .solve import minimize


def _dump(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _overrides(path):
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def cmd_calibrate(a):
    data = load_matrix(a.data)
    score, res, bulk = calibrate_bulk(data, a.geometry, a.gamma, a.delta, a.split_ratio, seed=a.seed)
    out = res.to_dict()
    out["geometry"] = a.geometry
    out["bulk"] = bulk_to_dict(bulk) if bulk is not None else None
    if a.centre_samples and bulk is not None:
        _, sel = split_fit_select(data, a.split_ratio, a.seed)
        diag = epsilon_diagnostics(score(sel), score(load_matrix(a.centre_samples)), a.gamma,
                                   a.delta, bulk_threshold=res.threshold)
        out["eps_c_lower_bound"] = eps_c_lower_bound(diag)
    _dump(out, a.out)
    return 0 if res.certified else 2


def cmd_risk(a):
    with open(a.instance) as fh:
        inst = json.load(fh)
    base = Path(a.instance).parent
    loss = PiecewiseAffineLoss(np.asarray(inst["pieces"]["slopes"], float),
                               np.asarray(inst["pieces"]["offsets"], float))
    samples = inst["samples"]
    samples = load_matrix(base / samples) if isinstance(samples, str) else np.asarray(samples, float)
    bulk = bulk_from_dict(inst["bulk"])
    inside = np.asarray(bulk.contains(samples), dtype=bool)
    if not inside.all():
        raise ValueError(f"{int((~inside).sum())} samples lie outside the bulk set")
    losses = loss(samples)
    w = np.asarray(inst["weights"], float) if "weights" in inst else np.full(losses.size, 1.0 / losses.size)
    mean = float(w @ losses)
    sup, piece = worstcase.sup_over_bulk(loss, bulk)
    rows = []
    for eps in inst["eps"]:
        eps = float(eps)
        rows.append({"eps": eps, "mean": mean, "sup": sup, "sup_piece": piece,
                     "lv_risk": worstcase.lv_risk(eps, mean, sup),
                     "tv_risk": worstcase.tv_risk(losses, w, eps, sup),
                     "reverse_lv_risk": worstcase.reverse_lv_risk(losses, w, eps) if eps > 0 else float(losses.max())})
    if a.out:
        emit_results(rows, Path(a.out), formats=("csv",))
    else:
        w_ = csv.writer(sys.stdout, lineterminator="\n")
        w_.writerow(list(rows[0]))
        for r in rows:
            w_.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])
    return 0


def cmd_oracle(a):
    lines, ok = run_discrete_checks(a.trials, a.seed, a.max_atoms)
    text = "\n".join(lines) + "\n"
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)
    return 0 if ok else 3


def cmd_centre(a):
    data = load_matrix(a.data)
    if a.kind == "empirical":
        sampler = EmpiricalSampler(data)
    elif a.kind == "copula":
        sampler = fit_copula_centre(data[:, :-1], data[:, -1], a.jitter)
    else:
        sampler = fit_student_t_gibbs(data, a.nu, iters=a.burn_in + a.states, burn_in=a.burn_in,
                                      ridge=a.ridge, seed=a.seed)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    sampler_to_json(sampler, a.out)
    return 0


def cmd_solve(a):
    oracle, x0, opts = load_problem_file(a.problem)
    if a.evaluate:
        x = np.asarray(json.loads(a.evaluate), float)
        f, g = oracle(x)
        _dump({"objective": oracle.name, "x": x.tolist(), "value": f,
               "subgradient": np.asarray(g).tolist()}, a.out)
        return 0
    for k in ("method", "tol", "max_iters"):
        v = getattr(a, k)
        if v is not None:
            opts[k] = v
    rep = minimize(oracle, x0, **opts)
    d = rep.to_dict()
    if not a.timings:
        d.pop("seconds")
    d["objective"] = oracle.name
    _dump(d, a.out)
    return 0


def _nv_config(a, **extra):
    over = _overrides(a.config)
    for flag, field in (("contamination", "contamination"), ("replications", "replications"),
                        ("budget", "budget"), ("grid_size", "grid_size"), ("workers", "workers")):
        v = getattr(a, flag, None)
        if v is not None:
            over[field] = v
    over.update(extra)
    return config_from_dict(nv.NewsvendorConfig, over)


def cmd_newsvendor(a):
    cfg = _nv_config(a)
    res = nv.run_newsvendor_frontier(cfg, a.methods.split(","), a.seed)
    out = Path(a.out)
    emit_results(res["replications"], out / "replications", timings=a.timings)
    emit_results(res["frontier"], out / "frontier", timings=a.timings)
    _dump({"seed": a.seed, "config": config_to_dict(cfg)}, out / "config.json")
    return 0


def cmd_sample_efficiency(a):
    cfg = _nv_config(a)
    budgets = [int(b) for b in a.budgets.split(",")]
    res = nv.run_sample_efficiency(cfg, budgets, a.methods.split(","), a.seed)
    out = Path(a.out)
    emit_results(res["deviation"], out / "deviation", timings=a.timings)
    emit_results(res["curves"], out / "curves", timings=a.timings)
    _dump({"seed": a.seed, "budgets": budgets, "config": config_to_dict(cfg)}, out / "config.json")
    return 0


def cmd_housing(a):
    over = _overrides(a.config)
    for flag, field in (("order_col", "order_col"), ("target_col", "target_col"),
                        ("lat_col", "lat_col"), ("lon_col", "lon_col"), ("gap", "gap")):
        v = getattr(a, flag)
        if v is not None:
            over[field] = v
    if a.features:
        over["feature_cols"] = a.features.split(",")
    if a.csv is None:
        over.setdefault("target_col", "target")
        over.setdefault("feature_cols", ["x1", "x2", "x3"])
    cfg = config_from_dict(rg.RegressionSplitConfig, over)
    source = a.csv if a.csv is not None else rg.make_shift_dataset(seed=a.seed)
    rows = rg.run_regression_experiment(source, cfg, a.methods.split(","), a.seed)
    out = Path(a.out)
    emit_results(rows, out / "metrics", timings=a.timings)
    _dump({"seed": a.seed, "csv": a.csv, "config": config_to_dict(cfg)}, out / "config.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bulkcredal", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("calibrate", help="fit a score and certify a bulk set")
    s.add_argument("--data", required=True, help="outcome matrix (CSV or .npy)")
    s.add_argument("--geometry", choices=("ellipsoid", "box"), default="ellipsoid")
    s.add_argument("--gamma", type=float, default=0.05)
    s.add_argument("--delta", type=float, default=0.05)
    s.add_argument("--split-ratio", type=float, default=0.5, help="fraction of rows used to fit the score")
    s.add_argument("--centre-samples", help="centre draws; adds the eps_c lower bound to the output")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("risk", help="LV, TV and reverse-LV risks of a JSON instance, as CSV")
    s.add_argument("--instance", required=True, help="JSON with pieces, bulk, samples and eps list")
    s.add_argument("--out", help="output prefix (writes <out>.csv); stdout when omitted")
    s.set_defaults(fn=cmd_risk)

    s = sub.add_parser("oracle", help="randomised brute-force cross-checks with a pass/fail report")
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--max-atoms", type=int, default=12)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_oracle)

    s = sub.add_parser("centre", help="fit and store a centre sampler")
    s.add_argument("--kind", choices=("empirical", "copula", "student-t"), required=True)
    s.add_argument("--data", required=True, help="outcome matrix; copula treats the last column as response")
    s.add_argument("--nu", type=float, default=3.0)
    s.add_argument("--burn-in", type=int, default=200)
    s.add_argument("--states", type=int, default=2500, help="retained Gibbs states")
    s.add_argument("--ridge", type=float, default=1e-6)
    s.add_argument("--jitter", type=float, default=1e-6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_centre)

    s = sub.add_parser("solve", help="minimise a problem file")
    s.add_argument("--problem", required=True)
    s.add_argument("--method", choices=("cutting_plane", "subgradient"))
    s.add_argument("--tol", type=float)
    s.add_argument("--max-iters", type=int)
    s.add_argument("--evaluate", metavar="X", help="only evaluate value and subgradient at X (JSON list)")
    s.add_argument("--timings", action="store_true", help="include wall-clock seconds")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_solve)

    for name, fn in (("newsvendor", cmd_newsvendor), ("sample-efficiency", cmd_sample_efficiency)):
        s = sub.add_parser(name, help="newsvendor tolerance sweep" if name == "newsvendor"
                           else "MSD-curve deviation across sampling budgets")
        s.add_argument("--contamination", type=float)
        s.add_argument("--replications", type=int)
        s.add_argument("--budget", type=int, help="predictive budget M")
        s.add_argument("--grid-size", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--config", help="JSON overrides for NewsvendorConfig")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--timings", action="store_true")
        s.add_argument("--out", required=True, help="output directory")
        if name == "newsvendor":
            s.add_argument("--methods", default=",".join(nv.METHODS))
        else:
            s.add_argument("--budgets", default=",".join(str(b) for b in nv.DEFAULT_BUDGETS))
            s.add_argument("--methods", default="LV,KL-BAS_PP,KL-BDRO")
        s.set_defaults(fn=fn)

    s = sub.add_parser("housing", help="gap-split regression with geo-block CV")
    s.add_argument("--csv", help="dataset; a synthetic shifted dataset is used when omitted")
    s.add_argument("--order-col")
    s.add_argument("--target-col")
    s.add_argument("--lat-col")
    s.add_argument("--lon-col")
    s.add_argument("--features", help="comma-separated feature columns")
    s.add_argument("--gap", type=float)
    s.add_argument("--methods", default=",".join(rg.METHODS))
    s.add_argument("--config", help="JSON overrides for RegressionSplitConfig")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--timings", action="store_true")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_housing)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"bulkcredal {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
