"""File formats used by the command line: matrices, bulk sets and problem files."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .calibrate import calibrate_bulk
from .core import BoxBulk, EllipsoidBulk, LADLoss, NewsvendorLoss, ProductBulk
from .solve import (build_cvar_objective, build_kl_bdro_objective, build_kl_dual_objective,
                    build_lv_objective, build_ridge_objective, build_saa_objective,
                    build_wasserstein_lad_objective)


def load_matrix(path) -> np.ndarray:
    """Numeric matrix from ``.npy`` or comma-separated text (one optional header line)."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.strip().split(",") if v.strip()]
        skip = 0
    except ValueError:
        skip = 1
    arr = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    return arr


def save_matrix(path, arr) -> None:
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    with open(path, "w") as fh:
        for row in arr:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def bulk_to_dict(bulk) -> dict:
    if isinstance(bulk, EllipsoidBulk):
        return {"kind": "ellipsoid", "center": bulk.center.tolist(), "chol": bulk.chol.tolist(),
                "radius": float(bulk.radius)}
    if isinstance(bulk, BoxBulk):
        return {"kind": "box", "center": bulk.center.tolist(),
                "halfwidths": bulk.halfwidths.tolist(), "radius": float(bulk.radius)}
    if isinstance(bulk, ProductBulk):
        return {"kind": "product", "blocks": [{"indices": list(idx), "bulk": bulk_to_dict(b)}
                                              for idx, b in bulk.blocks]}
    raise TypeError(f"unsupported bulk type {type(bulk).__name__}")


def bulk_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "ellipsoid":
        return EllipsoidBulk(np.asarray(d["center"], float), np.asarray(d["chol"], float),
                             float(d["radius"]))
    if kind == "box":
        return BoxBulk(np.asarray(d["center"], float), np.asarray(d["halfwidths"], float),
                       float(d["radius"]))
    if kind == "product":
        return ProductBulk(tuple((tuple(int(i) for i in blk["indices"]), bulk_from_dict(blk["bulk"]))
                                 for blk in d["blocks"]))
    raise ValueError(f"unknown bulk kind {kind!r}")


def loss_from_dict(d: dict, dim: int):
    kind = d.get("kind")
    if kind == "newsvendor":
        return NewsvendorLoss(float(d.get("h", 3.0)), float(d.get("b", 8.0)), int(d.get("d", dim)))
    if kind == "lad":
        return LADLoss(int(d.get("d", dim - 1)))
    raise ValueError(f"unknown loss kind {kind!r}; use 'newsvendor' or 'lad'")


def _path(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_problem(prob: dict, base_dir=".") -> tuple:
    """Build ``(oracle, x0, solver_options)`` from a problem fileification.

    See the format reference in the README for the recognised keys.
    """
    base = Path(base_dir)
    kind = prob.get("objective")
    if kind is None:
        raise ValueError("problem file needs an 'objective' key")
    samples = load_matrix(_path(base, prob["samples"])) if "samples" in prob else None
    eps = float(prob.get("eps", 0.0))
    if kind in ("wasserstein_lad", "ridge"):
        if samples is None:
            raise ValueError(f"{kind} needs 'samples' with the response in the last column")
        X, y = samples[:, :-1], samples[:, -1]
        if kind == "ridge":
            oracle = build_ridge_objective(X, y, float(prob.get("lam", 0.0)))
        else:
            sigma = float(prob.get("sigma_y", np.std(y)))
            oracle = build_wasserstein_lad_objective(X, y, float(prob.get("rho", 0.0)), sigma)
    else:
        if kind == "kl_bdro":
            draws = np.load(_path(base, prob["draws"])) if str(prob["draws"]).endswith(".npy") \
                else [load_matrix(_path(base, p)) for p in prob["draws"]]
            dim = draws[0].shape[1]
        else:
            dim = samples.shape[1] if samples is not None else int(prob["loss"].get("d"))
        loss = loss_from_dict(prob.get("loss", {}), dim)
        if kind == "saa":
            oracle = build_saa_objective(loss, samples)
        elif kind == "lv":
            if "bulk" in prob:
                bulk = bulk_from_dict(prob["bulk"])
            else:
                c = prob["calibrate"]
                _, res, bulk = calibrate_bulk(load_matrix(_path(base, c["data"])),
                                              c.get("geometry", "ellipsoid"), c.get("gamma", 0.05),
                                              c.get("delta", 0.05), c.get("fit_ratio", 0.5),
                                              seed=c.get("seed", 0))
                if bulk is None:
                    raise ValueError(res.message)
            if samples is not None and prob.get("filter_to_bulk", False):
                samples = samples[np.asarray(bulk.contains(samples), dtype=bool)]
            oracle = build_lv_objective(loss, samples, bulk, eps)
        elif kind == "cvar":
            oracle = build_cvar_objective(loss, samples, eps)
        elif kind == "kl":
            oracle = build_kl_dual_objective(loss, samples, eps)
        elif kind == "kl_bdro":
            oracle = build_kl_bdro_objective(loss, draws, eps)
        else:
            raise ValueError(f"unknown objective {kind!r}")
    x0 = np.asarray(prob["x0"], float) if "x0" in prob else 0.5 * (oracle.lower + oracle.upper)
    opts = {k: prob[k] for k in ("method", "tol", "max_iters") if k in prob}
    return oracle, x0, opts


def load_problem_file(path) -> tuple:
    path = Path(path)
    with open(path) as fh:
        return load_problem(json.load(fh), path.parent)
