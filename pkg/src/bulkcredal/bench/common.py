"""Config loading, seeding and result emission shared by the harnesses."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from pathlib import Path
from typing import Iterable

import numpy as np

TIMING_SUFFIX = "_seconds"


def replication_seed(master_seed: int, r: int) -> np.random.SeedSequence:
    """Independent stream for replication ``r`` of a run seeded by ``master_seed``."""
    return np.random.SeedSequence([int(master_seed), int(r)])


def config_from_dict(cls, overrides: dict | None = None):
    """Build ``cls`` from defaults plus ``overrides``; unknown keys are an error."""
    overrides = dict(overrides or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {', '.join(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name in overrides and isinstance(overrides[f.name], list):
            overrides[f.name] = tuple(overrides[f.name])
    return cls(**overrides)


def config_from_json(cls, path):
    with open(path) as fh:
        return config_from_dict(cls, json.load(fh))


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    if v is None:
        return ""
    return str(v)


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return None if math.isnan(v) else v
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def emit_results(rows: Iterable[dict], out_prefix, formats=("csv", "jsonl"),
                 timings: bool = False) -> list[Path]:
    """Write result rows to ``<out_prefix>.csv`` and/or ``<out_prefix>.jsonl``.

    Columns keep the key order of the first row. Timing columns (names ending
    in ``_seconds``) vary between runs and are dropped unless ``timings`` is
    set, so that identical configs give byte-identical files.
    """
    rows = [dict(r) for r in rows]
    if not rows:
        raise ValueError("no results to emit")
    cols = [c for c in rows[0] if timings or not c.endswith(TIMING_SUFFIX)]
    prefix = Path(out_prefix)
    if prefix.parent and not prefix.parent.exists():
        prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        path = prefix.with_name(prefix.name + "." + fmt)
        if path.exists() and not os.access(path, os.W_OK):
            raise PermissionError(f"cannot write {path}")
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(cols)
                for r in rows:
                    w.writerow([_fmt(r.get(c)) for c in cols])
        elif fmt == "jsonl":
            with open(path, "w") as fh:
                for r in rows:
                    fh.write(json.dumps({c: _jsonable(r.get(c)) for c in cols}) + "\n")
        else:
            raise ValueError(f"unknown format {fmt!r}")
        written.append(path)
    return written


def _parse(s: str):
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def read_results_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
