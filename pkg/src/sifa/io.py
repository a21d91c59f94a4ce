"""File formats: delimited matrices, JSON reports and truth manifests.

Matrices are UTF-8 delimited text.  Files written here start with a
``# sifa-matrix/1`` line, may carry one header row of column names, and
store values with 17 significant digits so that a read-write cycle is exact.
Files without the schema line (plain CSV/TSV from elsewhere) are accepted.

Reports are JSON objects with a ``schema`` key.  Python's JSON encoder
writes floats with ``repr``, which round-trips doubles exactly.
"""
from __future__ import annotations

import csv
import io as _io
import json
import os
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from sifa.core import CovariateMap, FitOptions, FitReport, LatentMoments, RankSet, SifaParams
from sifa.regression import RegressionFn

MATRIX_SCHEMA = "sifa-matrix/1"
FIT_SCHEMA = "sifa-fit-report/1"
TRUTH_SCHEMA = "sifa-truth/1"
RANK_SCHEMA = "sifa-rank-report/1"
METRICS_SCHEMA = "sifa-metrics-report/1"
BENCH_SCHEMA = "sifa-bench-report/1"
PROVENANCE_SCHEMA = "sifa-provenance/1"


class FormatError(ValueError):
    """A file does not follow the expected format."""


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Matrices
# ---------------------------------------------------------------------------


def _delimiter(path) -> str:
    return "\t" if Path(path).suffix.lower() in (".tsv", ".tab", ".txt") else ","


def format_matrix(M: np.ndarray, header: Optional[Sequence[str]] = None,
                  delimiter: str = ",") -> str:
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ValueError("only 2-d arrays can be written")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix contains non-finite values")
    buf = _io.StringIO()
    buf.write(f"# {MATRIX_SCHEMA}\n")
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    if header is not None:
        if len(header) != M.shape[1]:
            raise ValueError("header length does not match the column count")
        w.writerow(header)
    for row in M:
        w.writerow(["%.17g" % v for v in row])
    return buf.getvalue()


def write_matrix(path, M: np.ndarray, header: Optional[Sequence[str]] = None) -> None:
    atomic_write(path, format_matrix(M, header, _delimiter(path)))


def read_matrix(path, delimiter: Optional[str] = None):
    """Return ``(values, header)``; ``header`` is None when the file has none.

    A header is recognized as a first data row that does not parse as numbers.
    """
    delimiter = delimiter or _delimiter(path)
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    rows = list(csv.reader(lines, delimiter=delimiter))
    if not rows:
        raise FormatError(f"{path}: no data rows")
    header = None
    try:
        [float(x) for x in rows[0]]
    except ValueError:
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    if not rows:
        raise FormatError(f"{path}: no data rows")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise FormatError(f"{path}: row {i + 1} has {len(row)} fields, expected {width}")
        try:
            out[i] = [float(x) for x in row]
        except ValueError as exc:
            raise FormatError(f"{path}: row {i + 1}: {exc}") from None
    if not np.all(np.isfinite(out)):
        raise FormatError(f"{path}: non-finite values")
    if header is not None and len(header) != width:
        raise FormatError(f"{path}: header has {len(header)} names for {width} columns")
    return out, header


# ---------------------------------------------------------------------------
# JSON documents
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def dumps(doc: dict) -> str:
    return json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n"


def write_json(path, doc: dict) -> None:
    atomic_write(path, dumps(doc))


def read_json(path, schema: Optional[str] = None) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from None
    if schema is not None and doc.get("schema") != schema:
        raise FormatError(f"{path}: expected schema {schema!r}, found {doc.get('schema')!r}")
    return doc


def _mat(x, rows: int, cols: int) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    return a.reshape(rows, cols)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def fn_to_dict(f: RegressionFn) -> dict:
    out = {"family": f.family, "q": f.q}
    for name in ("beta", "active", "lam", "X_train", "y_train", "bandwidth", "fn_name"):
        val = getattr(f, name)
        if val is not None:
            out[name] = val
    if f.jitter:
        out["jitter"] = f.jitter
    return out


def fn_from_dict(d: dict) -> RegressionFn:
    kw = {"family": d["family"], "q": int(d["q"])}
    for name in ("beta", "y_train", "bandwidth"):
        if name in d:
            kw[name] = np.asarray(d[name], dtype=float)
    if "active" in d:
        kw["active"] = np.asarray(d["active"], dtype=int)
    if "X_train" in d:
        kw["X_train"] = np.asarray(d["X_train"], dtype=float).reshape(-1, kw["q"])
    if "lam" in d:
        kw["lam"] = float(d["lam"])
    if "fn_name" in d:
        kw["fn_name"] = d["fn_name"]
    kw["jitter"] = float(d.get("jitter", 0.0))
    return RegressionFn(**kw)


def map_to_dict(m: CovariateMap) -> dict:
    out = {"r": m.r, "fns": [fn_to_dict(f) for f in m.fns]}
    if m.mix is not None:
        out["mix"] = m.mix
    return out


def map_from_dict(d: dict) -> CovariateMap:
    r = int(d["r"])
    mix = None if "mix" not in d else _mat(d["mix"], len(d["fns"]), r)
    return CovariateMap(r, tuple(fn_from_dict(f) for f in d["fns"]), mix)


def params_to_dict(p: SifaParams) -> dict:
    return {
        "ranks": p.ranks.all(),
        "dims": p.dims,
        "V0": list(p.V0),
        "V": list(p.V),
        "Sigma0": p.Sigma0,
        "Sigma": list(p.Sigma),
        "noise_var": p.noise_var,
        "covariate_fns": [map_to_dict(m) for m in p.covariate_fns],
    }


def params_from_dict(d: dict) -> SifaParams:
    r0, *r = [int(x) for x in d["ranks"]]
    dims = [int(x) for x in d["dims"]]
    if len(r) != len(dims):
        raise FormatError("ranks and dims disagree on the number of views")
    V0 = tuple(_mat(v, p, r0) for v, p in zip(d["V0"], dims))
    V = tuple(_mat(v, p, rk) for v, p, rk in zip(d["V"], dims, r))
    Sigma = tuple(np.asarray(s, dtype=float).reshape(rk) for s, rk in zip(d["Sigma"], r))
    return SifaParams(tuple(map_from_dict(m) for m in d["covariate_fns"]), V0, V,
                      np.asarray(d["Sigma0"], dtype=float).reshape(r0), Sigma,
                      np.asarray(d["noise_var"], dtype=float))


def options_to_dict(o: FitOptions) -> dict:
    return asdict(o)


def options_from_dict(d: dict) -> FitOptions:
    d = dict(d)
    bw = d.get("kernel_bandwidth")
    if isinstance(bw, list):
        d["kernel_bandwidth"] = tuple(bw)
    return FitOptions(**d)


# ---------------------------------------------------------------------------
# Fit reports
# ---------------------------------------------------------------------------


def report_to_dict(rep: FitReport, extra: Optional[dict] = None) -> dict:
    """Structured form of a fit report.

    ``extra`` holds preprocessing records (column means, view scales, input
    paths) that the caller needs to reproduce or back-transform the fit.
    """
    doc = {
        "schema": FIT_SCHEMA,
        "label": rep.label,
        "params": params_to_dict(rep.params),
        "loglik_trace": list(rep.loglik_trace),
        "loglik": rep.loglik,
        "iterations": rep.iterations,
        "converged": rep.converged,
        "elapsed_seconds": rep.elapsed,
        "options": None if rep.options is None else options_to_dict(rep.options),
        "notes": list(rep.notes),
        "moments": None,
        "preprocessing": extra or {},
    }
    if rep.moments is not None:
        doc["moments"] = {"EU": rep.moments.EU, "C": rep.moments.C, "EUtU": rep.moments.EUtU}
    return doc


def report_from_dict(doc: dict) -> FitReport:
    if doc.get("schema") != FIT_SCHEMA:
        raise FormatError(f"expected schema {FIT_SCHEMA!r}")
    params = params_from_dict(doc["params"])
    R = params.ranks.total
    moments = None
    if doc.get("moments") is not None:
        m = doc["moments"]
        moments = LatentMoments(_mat(m["EU"], -1, R) if R else np.asarray(m["EU"], dtype=float),
                                _mat(m["C"], R, R), _mat(m["EUtU"], R, R))
    opts = None if doc.get("options") is None else options_from_dict(doc["options"])
    return FitReport(params, [float(x) for x in doc["loglik_trace"]], int(doc["iterations"]),
                     bool(doc["converged"]), float(doc["elapsed_seconds"]), moments, None, opts,
                     doc["label"], list(doc["notes"]))


def write_report(path, rep: FitReport, extra: Optional[dict] = None) -> None:
    write_json(path, report_to_dict(rep, extra))


def read_report(path) -> FitReport:
    return report_from_dict(read_json(path, FIT_SCHEMA))


# ---------------------------------------------------------------------------
# Simulation truth
# ---------------------------------------------------------------------------


def spec_to_dict(spec) -> dict:
    d = asdict(spec)
    d["ranks"] = spec.ranks.all()
    return d


def spec_from_dict(d: dict):
    from sifa.simulate import SimSpec

    d = dict(d)
    r0, *r = d["ranks"]
    d["ranks"] = RankSet(int(r0), tuple(r))
    for key in ("dims", "noise_sd", "joint_sd", "individual_sd"):
        if d.get(key) is not None:
            d[key] = tuple(d[key])
    return SimSpec(**d)


def truth_to_dict(truth, files: dict) -> dict:
    """Truth manifest; large matrices live in the delimited files named in ``files``."""
    return {
        "schema": TRUTH_SCHEMA,
        "params": params_to_dict(truth.params),
        "conditions": truth.conditions,
        "spec": None if truth.spec is None else spec_to_dict(truth.spec),
        "files": dict(files),
    }


def read_truth(path):
    """Reload a truth manifest and its matrices as a :class:`sifa.simulate.GroundTruth`."""
    from sifa.simulate import GroundTruth

    doc = read_json(path, TRUTH_SCHEMA)
    base = Path(path).parent
    mats = {k: read_matrix(base / v)[0] for k, v in doc["files"].items()
            if k in ("factors", "deterministic", "signal", "noise")}
    params = params_from_dict(doc["params"])
    spec = None if doc.get("spec") is None else spec_from_dict(doc["spec"])
    return GroundTruth(params, mats["factors"], mats["deterministic"], mats["signal"],
                       mats["noise"], doc["conditions"], spec)
