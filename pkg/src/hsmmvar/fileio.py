"""Data ingestion, run configuration, model serialization and result bundles."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import Dataset
from .em import ModelParams, lambda_grid
from .emission import VarParams
from .errors import InputError
from .hidden import HazardParams

FLOAT_FMT = "%.17g"
MODEL_FORMAT = "hsmmvar-model/1"


# -- run configuration ----------------------------------------------------------------

_DEFAULTS = {
    "data": {
        "path": None,
        "delimiter": ",",
        "time": "time",
        "outcomes": None,
        "emission_covariates": [],
        "hazard_covariates": [],
        "log_transform": False,
        "weekend": False,
    },
    "model": {
        "K": [2, 3, 4],
        "H": 1,
        "m": 28,
        "link": "cloglog",
        "lambda0": None,
        "lambda_grid": {"mode": "log", "n": 20, "lo": 1e-4, "hi": 0.05},
        "max_iter": 500,
        "init": "kmeans",
        "file": None,
    },
    "seeds": [0],
    "bootstrap": {"B": 100, "K": None, "lambda_grid": None, "level": 0.95, "seed": 0},
    "risk": {"tau": 0.05, "tau_star": 0.05, "measure": "mcovar"},
    "simulate": {"scenario": "simulation-2", "T": None, "seed": 0, "truth": None},
    "out": "results",
}


def _merge(base, over, where=""):
    out = copy.deepcopy(base)
    for key, val in (over or {}).items():
        if key not in base:
            raise InputError(f"unknown configuration key {where + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict) and key != "lambda_grid":
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    """Parsed run configuration; ``raw`` holds every field after defaults are applied."""

    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read configuration {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise InputError(f"configuration {path} does not parse: {exc}") from exc
        return cls.from_dict(doc, path.parent.resolve())

    @classmethod
    def from_dict(cls, doc, base_dir=None):
        if not isinstance(doc, dict):
            raise InputError("configuration must be a mapping")
        cfg = cls(_merge(_DEFAULTS, doc), Path(base_dir or Path.cwd()))
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.raw[key]

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def K_list(self):
        K = self.raw["model"]["K"]
        return [int(K)] if np.isscalar(K) else [int(k) for k in K]

    @property
    def lambda_list(self):
        return _as_grid(self.raw["model"]["lambda_grid"])

    @property
    def seeds(self):
        s = self.raw["seeds"]
        return [int(s)] if np.isscalar(s) else [int(v) for v in s]

    def validate(self):
        model = self.raw["model"]
        if not self.K_list or min(self.K_list) < 1:
            raise InputError("model.K must list positive state counts")
        if int(model["H"]) < 0 or int(model["m"]) < 1:
            raise InputError("model.H must be >= 0 and model.m >= 1")
        if model["link"] not in ("cloglog", "logit"):
            raise InputError("model.link must be cloglog or logit")
        if not self.lambda_list:
            raise InputError("model.lambda_grid must be non-empty")
        if not self.seeds:
            raise InputError("seeds must be non-empty")
        r = self.raw["risk"]
        if r["measure"] not in ("mcovar", "mcoes"):
            raise InputError("risk.measure must be mcovar or mcoes")
        for key in ("tau", "tau_star"):
            if not 0 < float(r[key]) <= 0.5:
                raise InputError(f"risk.{key} must lie in (0, 0.5]")


def _as_grid(grid):
    if isinstance(grid, dict):
        grid = dict(grid)
        unknown = set(grid) - {"mode", "n", "lo", "hi"}
        if unknown:
            raise InputError(f"unknown lambda_grid keys {sorted(unknown)}")
        return lambda_grid(int(grid.get("n", 20)), float(grid.get("lo", 1e-4)),
                           float(grid.get("hi", 0.05)), grid.get("mode", "log"))
    if grid is None:
        return []
    vals = [float(v) for v in (grid if isinstance(grid, (list, tuple)) else [grid])]
    if any(v < 0 or not np.isfinite(v) for v in vals):
        raise InputError("penalties must be finite and nonnegative")
    return vals


# -- data files -----------------------------------------------------------------------

def _parse_time(values):
    """Either ISO dates (day resolution) or integers; returns ``(parsed, kind)``."""
    try:
        ints = np.array([int(v) for v in values])
        return ints, "index"
    except ValueError:
        pass
    try:
        dates = np.array([np.datetime64(v, "D") for v in values])
    except ValueError as exc:
        raise InputError(f"time column is neither integer nor ISO date: {exc}") from exc
    for v, d in zip(values, dates):
        if str(d) != v.strip():
            raise InputError(f"time value {v!r} is not an ISO-8601 date")
    return dates, "date"


def weekend_indicator(dates):
    """1 on Saturdays and Sundays."""
    weekday = (np.asarray(dates, dtype="datetime64[D]").astype(np.int64) + 3) % 7
    return (weekday >= 5).astype(float)


def ingest(path, config: RunConfig | dict):
    """Read a delimiter-separated file into a :class:`Dataset` per the column roles in ``config``."""
    if isinstance(config, dict):
        config = RunConfig.from_dict(config)
    dcfg = config["data"]
    path = config.resolve(path)
    delim = dcfg["delimiter"]
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh, delimiter=delim))
    except OSError as exc:
        raise InputError(f"cannot read data file {path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise InputError(f"{path}: no data rows")
    col = {name: i for i, name in enumerate(header)}
    tname = dcfg["time"]
    outcomes = dcfg["outcomes"]
    if outcomes is None:
        raise InputError("data.outcomes must name the outcome columns")
    xcols, zcols = list(dcfg["emission_covariates"]), list(dcfg["hazard_covariates"])
    for name in [tname, *outcomes, *xcols, *zcols]:
        if not isinstance(name, str):
            raise InputError(f"column name {name!r} is not a string; quote it in the configuration")
        if name not in col:
            raise InputError(f"{path}: column {name!r} not found in header")
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise InputError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")

    def numeric(names):
        out = np.empty((len(body), len(names)))
        for c, name in enumerate(names):
            j = col[name]
            for r, row in enumerate(body):
                cell = row[j].strip()
                if cell == "" or cell.lower() in ("na", "nan"):
                    raise InputError(f"{path}: missing value at row {r + 2}, column {name!r}")
                try:
                    v = float(cell)
                except ValueError:
                    raise InputError(f"{path}: non-numeric value {cell!r} at row {r + 2}, column {name!r}") from None
                if not np.isfinite(v):
                    raise InputError(f"{path}: non-finite value at row {r + 2}, column {name!r}")
                out[r, c] = v
        return out

    raw_time = [row[col[tname]].strip() for row in body]
    for r, v in enumerate(raw_time):
        if v == "":
            raise InputError(f"{path}: missing value at row {r + 2}, column {tname!r}")
    t, kind = _parse_time(raw_time)
    step = np.diff(t).astype(np.int64)
    bad = np.flatnonzero(step != 1)
    if bad.size:
        i = bad[0]
        what = "gap" if step[i] > 1 else "non-increasing step"
        raise InputError(f"{path}: time index has a {what} between {raw_time[i]} (row {i + 2}) "
                         f"and {raw_time[i + 1]} (row {i + 3})")
    y = numeric(outcomes)
    if dcfg["log_transform"]:
        nonpos = np.argwhere(y <= 0)
        if nonpos.size:
            r, c = nonpos[0]
            raise InputError(f"{path}: cannot log-transform nonpositive value at row {r + 2}, "
                             f"column {outcomes[c]!r}")
        y = np.log(y)
    x = numeric(xcols)
    if dcfg["weekend"]:
        if kind != "date":
            raise InputError("data.weekend requires a date time column")
        x = np.column_stack([x, weekend_indicator(t)])
        xcols = xcols + ["weekend"]
    z = numeric(zcols)
    H = int(config["model"]["H"])
    if H >= len(body) / 10:
        raise InputError(f"H = {H} is not below T/10 = {len(body) / 10:g}")
    return Dataset(y, x, z, np.array(raw_time), tuple(outcomes), tuple(xcols), tuple(zcols))


def _fmt(v):
    return FLOAT_FMT % v


def write_dataset(path, data: Dataset, delimiter=","):
    """Write ``data`` with a time column followed by outcomes, emission and hazard covariates."""
    names = list(data.y_names) or [f"y{i + 1}" for i in range(data.p)]
    xn = list(data.x_names) or [f"x{i + 1}" for i in range(data.J)]
    zn = list(data.z_names) or [f"z{i + 1}" for i in range(data.L)]
    time = data.time if data.time is not None else np.arange(1, data.T + 1)
    rows = [[str(time[t])] + [_fmt(v) for v in np.concatenate([data.y[t], data.x[t], data.z[t]])]
            for t in range(data.T)]
    write_rows(path, ["time"] + names + xn + zn, rows, delimiter)
    return {"time": "time", "outcomes": names, "emission_covariates": xn, "hazard_covariates": zn}


def write_rows(path, header, rows, delimiter=","):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_table(path, header, matrix, index=None, index_name="t", delimiter=","):
    """Numeric matrix with an optional leading index column."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    rows = []
    for r, vals in enumerate(matrix):
        cells = [_fmt(v) for v in vals]
        rows.append(([str(index[r])] if index is not None else []) + cells)
    write_rows(path, ([index_name] if index is not None else []) + list(header), rows, delimiter)


def read_table(path, delimiter=","):
    """Header and rows of a delimited file (cells left as strings)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    return rows[0], rows[1:]


# -- model serialization ----------------------------------------------------------------

def params_to_dict(params: ModelParams, extra=None):
    v, h = params.var, params.hazard
    doc = {
        "format": MODEL_FORMAT,
        "dims": params.dims,
        "link": h.link,
        "b0": v.b0.tolist(), "B": v.B.tolist(), "A": v.A.tolist(), "Sigma": v.Sigma.tolist(),
        "beta0": h.beta0.tolist(), "beta1": h.beta1.tolist(), "beta2": h.beta2.tolist(),
        "omega": params.omega.tolist(), "pi": params.pi.tolist(),
    }
    if extra:
        doc.update(extra)
    return doc


def params_from_dict(doc):
    if doc.get("format") != MODEL_FORMAT:
        raise InputError(f"unsupported model format {doc.get('format')!r}")
    d = doc["dims"]
    K, p, H, J, L = d["K"], d["p"], d["H"], d["J"], d["L"]

    def arr(key, shape):
        a = np.array(doc[key], dtype=float)
        return a.reshape(shape)

    var = VarParams(arr("b0", (K, p)), arr("B", (K, p, J)), arr("A", (K, H, p, p)), arr("Sigma", (K, p, p)))
    hz = HazardParams(arr("beta0", (K,)), arr("beta1", (K,)), arr("beta2", (K, L)), doc["link"])
    return ModelParams(hz, arr("omega", (K, K)), arr("pi", (K,)), var, int(d["m"]))


def dump_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def save_model(path, params: ModelParams, **extra):
    dump_json(path, params_to_dict(params, extra))


def load_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read model file {path}: {exc}") from exc
    return params_from_dict(doc), doc


# -- result bundle --------------------------------------------------------------------

def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class ResultBundle:
    """One output directory: emitted tables plus ``manifest.json`` with their checksums."""

    MANIFEST = "manifest.json"

    def __init__(self, out_dir, force=False):
        self.dir = Path(out_dir)
        if self.dir.exists() and any(self.dir.iterdir()):
            if not force:
                raise InputError(f"output directory {self.dir} is not empty; pass --force to overwrite")
            for child in self.dir.iterdir():
                if child.is_file():
                    child.unlink()
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, name):
        if name not in self.files:
            self.files.append(name)
        return self.dir / name

    def write_manifest(self, doc):
        doc = dict(doc)
        doc["files"] = {name: sha256(self.dir / name) for name in sorted(self.files)
                        if (self.dir / name).exists()}
        dump_json(self.dir / self.MANIFEST, doc)
        return doc


def verify_manifest(out_dir):
    """Names of files whose checksum no longer matches the manifest."""
    out_dir = Path(out_dir)
    with open(out_dir / ResultBundle.MANIFEST, encoding="utf-8") as fh:
        doc = json.load(fh)
    return [name for name, digest in doc.get("files", {}).items()
            if not os.path.exists(out_dir / name) or sha256(out_dir / name) != digest]
