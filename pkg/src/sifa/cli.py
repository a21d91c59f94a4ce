"""Command-line interface: ``sifa simulate | fit | rank | metrics | bench``.

Exit codes: 0 success, 2 invalid configuration or input, 3 I/O failure,
4 non-convergence under ``--strict``.  Every command accepts ``--config``
(a YAML mapping of option names to values; command-line flags win) and
``--threads`` (default from ``SIFA_THREADS``).
"""
from __future__ import annotations

import contextlib
import functools
import os
from pathlib import Path

import click
import numpy as np
import yaml

import sifa
from sifa import io as sio
from sifa.core import FitOptions, MultiViewDataset, RankSet

EXIT_INVALID = 2
EXIT_IO = 3
EXIT_NOT_CONVERGED = 4


class CliError(click.ClickException):
    def __init__(self, message: str, exit_code: int = EXIT_INVALID):
        super().__init__(message)
        self.exit_code = exit_code


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _load_config(ctx: click.Context, param, value):
    """Eager callback: turn a YAML file into click defaults for this command."""
    if value is None:
        return None
    try:
        with open(value, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise CliError(f"cannot read config {value}: {exc}", EXIT_IO) from None
    except yaml.YAMLError as exc:
        raise CliError(f"config {value} is not valid YAML: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError(f"config {value} must be a mapping of option names to values")
    params = {p.name: p for p in ctx.command.params if p.name not in ("config",)}
    defaults = {}
    for key, val in cfg.items():
        name = str(key).replace("-", "_")
        if name not in params:
            raise CliError(f"unknown config key {key!r} for '{ctx.command.name}'; "
                           f"allowed: {', '.join(sorted(params))}")
        p = params[name]
        if isinstance(val, list) and not p.multiple:
            val = ",".join(str(v) for v in val)
        elif p.multiple and not isinstance(val, list):
            val = [val]
        defaults[name] = val
    ctx.default_map = {**(ctx.default_map or {}), **defaults}
    return value


def common_options(fn):
    @click.option("--config", type=click.Path(dir_okay=False), callback=_load_config,
                  is_eager=True, expose_value=False, help="YAML file of option defaults.")
    @click.option("--threads", type=click.IntRange(min=1), default=None,
                  help="Cap on BLAS threads (default: $SIFA_THREADS, else library default).")
    @functools.wraps(fn)
    def wrapper(*args, threads=None, **kwargs):
        with _thread_limit(threads), _error_mapping():
            return fn(*args, **kwargs)
    return wrapper


@contextlib.contextmanager
def _thread_limit(threads):
    if threads is None and os.environ.get("SIFA_THREADS"):
        try:
            threads = int(os.environ["SIFA_THREADS"])
        except ValueError:
            raise CliError("SIFA_THREADS must be an integer") from None
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


@contextlib.contextmanager
def _error_mapping():
    try:
        yield
    except (click.ClickException, click.exceptions.Exit):
        raise
    except OSError as exc:
        raise CliError(f"I/O error: {exc}", EXIT_IO) from None
    except (ValueError, KeyError, TypeError, np.linalg.LinAlgError) as exc:
        raise CliError(str(exc)) from None


def _split_paths(values) -> list:
    out = []
    for v in values:
        out.extend(s for s in str(v).split(",") if s)
    return out


def _parse_ranks(text: str) -> RankSet:
    try:
        return RankSet.parse(text)
    except ValueError as exc:
        raise CliError(f"malformed rank set {text!r}: {exc}") from None


def _dataset(mats, X, center: bool) -> MultiViewDataset:
    n = {m.shape[0] for m in mats}
    if len(n) != 1 or (X is not None and X.shape[0] not in n):
        raise CliError("view and covariate files must have the same number of rows")
    return MultiViewDataset.from_arrays(mats, X, center=center)


def _load_dataset(views, covariates, center: bool) -> MultiViewDataset:
    paths = _split_paths(views)
    if not paths:
        raise CliError("at least one --views file is required")
    mats = [sio.read_matrix(p)[0] for p in paths]
    X = None if covariates is None else sio.read_matrix(covariates)[0]
    return _dataset(mats, X, center)


def _preprocess(data: MultiViewDataset, raw_views, X_raw, center: bool, normalize: str):
    """Record of centering means and view scales; returns (data, record)."""
    record = {"centered": center, "normalize": normalize}
    if center:
        record["view_means"] = [v.mean(axis=0) for v in raw_views]
        record["covariate_means"] = None if X_raw is None else X_raw.mean(axis=0)
    if normalize == "frobenius":
        scales = []
        mats = []
        for Y in data.arrays():
            nrm = float(np.linalg.norm(Y))
            if nrm == 0.0:
                raise CliError("cannot normalize an all-zero view")
            scales.append(1.0 / nrm)
            mats.append(Y / nrm)
        data = data.with_views(mats)
        record["view_scales"] = scales
    return data, record


def _apply_record(views, X, record) -> MultiViewDataset:
    """Apply a stored preprocessing record to raw matrices."""
    mats = [np.asarray(v, dtype=float) for v in views]
    if record.get("centered"):
        mats = [m - np.asarray(mu) for m, mu in zip(mats, record["view_means"])]
        if X is not None and record.get("covariate_means") is not None:
            X = X - np.asarray(record["covariate_means"])
    if record.get("view_scales"):
        mats = [m * s for m, s in zip(mats, record["view_scales"])]
    return MultiViewDataset.from_arrays(mats, X, center=False)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@click.group()
@click.version_option(sifa.__version__, prog_name="sifa")
def cli():
    """Supervised integrated factor analysis of multi-view data."""


def _setting_name(text: str) -> str:
    t = text.strip().lower()
    return f"s{t}" if t.isdigit() else t


@cli.command()
@click.option("--setting", default="3", show_default=True,
              help="1-5, 'scaled' or 'custom' (s1..s5 also accepted).")
@click.option("--n", "n", type=click.IntRange(min=2), default=500, show_default=True)
@click.option("--p", "p", default="200,200", show_default=True, help="Comma-separated view dimensions.")
@click.option("--q", "q", type=click.IntRange(min=1), default=None,
              help="Covariate count (default 1 for settings 4-5, else 10).")
@click.option("--ranks", default="2,3,3", show_default=True, help="r0,r1,...,rK")
@click.option("--noise", type=click.Choice(["gaussian", "student_t"]), default="gaussian", show_default=True)
@click.option("--df", type=float, default=None, help="Degrees of freedom for student_t noise.")
@click.option("--noise-sd", default=None, help="Comma-separated per-view noise standard deviations.")
@click.option("--scale", type=float, default=1.0, show_default=True, help="View multiplier for 'scaled'.")
@click.option("--scaled-view", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--conditions", type=click.Choice(["orthogonal", "general"]), default="orthogonal",
              show_default=True, help="Loading conditions for 'custom'.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "tsv"]), default="csv", show_default=True)
@click.option("--out", "out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@common_options
def simulate(setting, n, p, q, ranks, noise, df, noise_sd, scale, scaled_view, conditions, seed, fmt, out):
    """Generate a simulated dataset with its ground truth."""
    from sifa.simulate import SimSpec, gen_setting

    dims = tuple(int(x) for x in p.split(",") if x.strip())
    nsd = None if noise_sd is None else tuple(float(x) for x in noise_sd.split(","))
    spec = SimSpec(setting=_setting_name(setting), n=n, dims=dims, q=q, ranks=_parse_ranks(ranks),
                   noise=noise, noise_sd=nsd, df=df, seed=seed, scale=scale,
                   scaled_view=scaled_view, conditions=conditions)
    data, truth = gen_setting(spec)
    outdir = Path(out)
    files = {}
    for k, Y in enumerate(data.arrays(), start=1):
        files[f"y{k}"] = f"y{k}.{fmt}"
        sio.write_matrix(outdir / files[f"y{k}"], Y)
    if data.covariates is not None:
        files["x"] = f"x.{fmt}"
        sio.write_matrix(outdir / files["x"], data.covariates)
    for name in ("factors", "deterministic", "signal", "noise"):
        files[name] = f"{name}.{fmt}"
        sio.write_matrix(outdir / files[name], getattr(truth, name))
    sio.write_json(outdir / "truth.json", sio.truth_to_dict(truth, files))
    sio.write_json(outdir / "provenance.json", {
        "schema": sio.PROVENANCE_SCHEMA, "version": sifa.__version__, "command": "simulate",
        "seed": seed, "spec": sio.spec_to_dict(spec), "files": files,
    })
    click.echo(f"wrote {len(files) + 2} files to {outdir}")


@cli.command("fit")
@click.option("--views", multiple=True, required=True,
              help="View matrix files (repeat the flag or separate with commas).")
@click.option("--covariates", type=click.Path(dir_okay=False), default=None,
              help="Covariate matrix; omit for the covariate-free (f=0) configuration.")
@click.option("--ranks", required=True, help="r0,r1,...,rK")
@click.option("--mode", type=click.Choice(["orthogonal", "general"]), default="orthogonal", show_default=True)
@click.option("--regression", type=click.Choice(["linear", "lasso", "kernel"]), default="linear",
              show_default=True)
@click.option("--tol", type=float, default=1e-6, show_default=True)
@click.option("--max-iters", type=click.IntRange(min=1), default=500, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--init", type=click.Choice(["svd", "random"]), default="svd", show_default=True)
@click.option("--inner-rounds", type=click.IntRange(min=1), default=1, show_default=True,
              help="Loading rounds per M-step in general mode.")
@click.option("--bandwidth", default="silverman", show_default=True,
              help="Kernel bandwidth: silverman, loocv or a positive number.")
@click.option("--lasso-folds", type=click.IntRange(min=2), default=5, show_default=True)
@click.option("--no-center", is_flag=True, help="Do not column-center the inputs.")
@click.option("--normalize", type=click.Choice(["none", "frobenius"]), default="none", show_default=True,
              help="Scale every view to unit Frobenius norm (general mode only).")
@click.option("--strict", is_flag=True, help="Exit with status 4 if EM does not converge.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Report file (JSON).")
@common_options
def fit_cmd(views, covariates, ranks, mode, regression, tol, max_iters, seed, init, inner_rounds,
            bandwidth, lasso_folds, no_center, normalize, strict, out):
    """Fit the model by EM and write a report."""
    from sifa.em import fit

    if normalize == "frobenius" and mode == "orthogonal":
        raise CliError("--normalize frobenius is only allowed in general mode")
    try:
        bw = float(bandwidth)
    except ValueError:
        bw = bandwidth
    rs = _parse_ranks(ranks)
    paths = _split_paths(views)
    raw = [sio.read_matrix(p)[0] for p in paths]
    X_raw = None if covariates is None else sio.read_matrix(covariates)[0]
    data = _dataset(raw, X_raw, center=not no_center)
    data, record = _preprocess(data, raw, X_raw, not no_center, normalize)
    record.update(views=paths, covariates=covariates)
    opts = FitOptions(mode=mode, regression_family=regression, max_iters=max_iters, tol=tol, seed=seed,
                      inner_mstep_rounds=inner_rounds, init=init, kernel_bandwidth=bw,
                      lasso_folds=lasso_folds)
    rep = fit(data, rs, opts, structure=False)
    sio.write_report(out, rep, record)
    status = "converged" if rep.converged else "did not converge"
    click.echo(f"{rep.label}: {status} after {rep.iterations} iterations, "
               f"log-likelihood {rep.loglik:.10g}")
    if strict and not rep.converged:
        raise CliError("EM did not converge", EXIT_NOT_CONVERGED)


def _parse_candidates(text: str) -> list:
    sets = []
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        try:
            sets.append(RankSet.parse(chunk))
        except ValueError as exc:
            raise CliError(f"malformed candidate {chunk!r}: {exc}") from None
    if not sets:
        raise CliError("no candidate rank sets given")
    if len({s.K for s in sets}) != 1:
        raise CliError("candidate rank sets disagree on the number of views")
    return sets


def two_step_record(r_total: int, r_star) -> dict:
    from sifa.ranks import two_step_ranks

    rs = two_step_ranks(r_total, r_star)
    raw = (sum(r_star) - r_total) / (len(r_star) - 1)
    return {
        "method": "two_step",
        "combined_rank": r_total,
        "signal_ranks": list(r_star),
        "raw_r0": raw,
        "rounded": raw != int(raw),
        "clamped": {"r0": raw < -0.5, "r": [r - int(np.floor(raw + 0.5)) < 0 for r in r_star]},
        "ranks": rs.all(),
    }


@cli.command()
@click.option("--views", multiple=True, help="View matrix files (repeat or comma-separate).")
@click.option("--covariates", type=click.Path(dir_okay=False), default=None)
@click.option("--threshold", type=float, default=0.9, show_default=True,
              help="Variance-explained threshold for the two-step estimate.")
@click.option("--signal-ranks", default=None,
              help="'total:r1,...,rK' signal ranks; skips estimation from data.")
@click.option("--lcv", is_flag=True, help="Select among --candidates by likelihood cross-validation.")
@click.option("--candidates", default=None, help="Semicolon-separated rank sets, e.g. '2,3,3;1,2,2'.")
@click.option("--folds", type=click.IntRange(min=2), default=10, show_default=True)
@click.option("--mode", type=click.Choice(["orthogonal", "general"]), default="orthogonal", show_default=True)
@click.option("--regression", type=click.Choice(["linear", "lasso", "kernel"]), default="linear",
              show_default=True)
@click.option("--tol", type=float, default=1e-6, show_default=True)
@click.option("--max-iters", type=click.IntRange(min=1), default=500, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--no-center", is_flag=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Report file (JSON).")
@common_options
def rank(views, covariates, threshold, signal_ranks, lcv, candidates, folds, mode, regression, tol,
         max_iters, seed, no_center, out):
    """Estimate ranks by the two-step rule or select them by LCV."""
    from sifa.ranks import RankCandidates, estimate_signal_rank, lcv as run_lcv

    if lcv:
        if candidates is None:
            raise CliError("--lcv needs --candidates")
        sets = _parse_candidates(candidates)
        data = _load_dataset(views, covariates, center=not no_center)
        opts = FitOptions(mode=mode, regression_family=regression, tol=tol, max_iters=max_iters, seed=seed)
        res = run_lcv(data, RankCandidates(sets, folds), opts)
        doc = {"method": "lcv", "folds": folds, "candidates": [s.all() for s in sets],
               "scores": res.scores, "means": res.means, "margins": res.margins(),
               "nonconverged": res.flags, "best": res.best, "ranks": res.best_ranks.all()}
    elif signal_ranks is not None:
        try:
            total, rest = signal_ranks.split(":")
            r_star = [int(x) for x in rest.split(",")]
            doc = two_step_record(int(total), r_star)
        except ValueError as exc:
            raise CliError(f"malformed --signal-ranks {signal_ranks!r}: {exc}") from None
    else:
        if not 0 < threshold < 1:
            raise CliError("--threshold must lie strictly between 0 and 1")
        data = _load_dataset(views, covariates, center=not no_center)
        r_star = [estimate_signal_rank(Y, threshold) for Y in data.arrays()]
        doc = two_step_record(estimate_signal_rank(data.stacked(), threshold), r_star)
        doc["threshold"] = threshold
    doc["schema"] = sio.RANK_SCHEMA
    if out:
        sio.write_json(out, doc)
    click.echo("ranks " + ",".join(str(r) for r in doc["ranks"]))


def _load_params_and_scores(path):
    """A fit report, or a truth manifest treated as a perfect fit."""
    doc = sio.read_json(path)
    if doc.get("schema") == sio.TRUTH_SCHEMA:
        truth = sio.read_truth(path)
        return truth.params, truth.factors, None, {}
    rep = sio.report_from_dict(doc)
    if rep.moments is None:
        raise CliError(f"{path} has no latent moments")
    return rep.params, rep.moments.EU, rep, doc.get("preprocessing", {})


@cli.command()
@click.option("--report", "report_path", type=click.Path(dir_okay=False), required=True,
              help="Fit report (or a truth manifest).")
@click.option("--truth", type=click.Path(dir_okay=False), default=None, help="Truth manifest.")
@click.option("--views", multiple=True, help="Views for the variance table or baselines.")
@click.option("--covariates", type=click.Path(dir_okay=False), default=None)
@click.option("--groups", default=None,
              help="Covariate groups for the variance table, e.g. 'age:0,1;sex:2'.")
@click.option("--baseline", type=click.Choice(["none", "pca"]), default="none", show_default=True,
              help="Also score a PCA fit of the concatenated views at the fitted total rank.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Report file (JSON).")
@click.option("--table", type=click.Path(dir_okay=False), default=None,
              help="Delimited metric table (.csv or .tsv).")
@common_options
def metrics(report_path, truth, views, covariates, groups, baseline, out, table):
    """Distances to the truth and the variance-explained table."""
    from sifa.metrics import evaluate, pca_baseline, variance_explained

    params, EU, rep, record = _load_params_and_scores(report_path)
    doc = {"schema": sio.METRICS_SCHEMA, "report": str(report_path)}
    rows = []
    if truth is not None:
        gt = sio.read_truth(truth)
        if gt.params.dims != params.dims or gt.signal.shape[0] != EU.shape[0]:
            raise CliError("fit and truth dimensions do not match")
        m = evaluate(params, EU, gt.params, gt.signal)
        doc.update(m.to_dict())
        rows += [(f"d_G_{k}", v) for k, v in m.d_G.items()]
        rows += [("max_principal_angle", m.max_principal_angle), ("recovery_error", m.recovery_error)]
    data = None
    if views:
        raw = [sio.read_matrix(p)[0] for p in _split_paths(views)]
        X = None if covariates is None else sio.read_matrix(covariates)[0]
        data = _apply_record(raw, X, record) if record else MultiViewDataset.from_arrays(raw, X, center=True)
        if data.dims != params.dims:
            raise CliError("view dimensions do not match the fit")
    if baseline == "pca":
        if data is None or truth is None:
            raise CliError("--baseline pca needs --views and --truth")
        scores, loadings = pca_baseline(data.stacked(), params.ranks.total)
        err = float(np.linalg.norm(gt.signal - scores @ loadings.T))
        doc["pca_recovery_error"] = err
        rows.append(("pca_recovery_error", err))
    if data is not None and rep is not None:
        grp = None
        if groups:
            grp = {}
            for chunk in groups.split(";"):
                name, cols = chunk.split(":")
                grp[name.strip()] = [int(c) for c in cols.split(",")]
        tab = variance_explained(rep, data, grp)
        doc["variance"] = tab
        for view, parts in tab.items():
            rows += [(f"{view}_{key}", parts[key]) for key in ("joint", "individual", "noise")]
    if out:
        sio.write_json(out, doc)
    if table:
        delim = "\t" if Path(table).suffix.lower() in (".tsv", ".txt") else ","
        text = f"# {sio.METRICS_SCHEMA}\nmetric{delim}value\n"
        text += "".join(f"{k}{delim}{v:.17g}\n" for k, v in rows)
        sio.atomic_write(table, text)
    for k, v in rows:
        click.echo(f"{k}\t{v:.6g}")


@cli.command()
@click.option("--sizes", multiple=True, default=("100,100,100,10",), show_default=True,
              help="'n,p1,...,pK,q' per problem size; repeat for more.")
@click.option("--repeats", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--modes", default="orthogonal,general", show_default=True)
@click.option("--kernels/--no-kernels", default=False, show_default=True,
              help="Also time the compiled and pure-Python regression kernels.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Report file (JSON).")
@click.option("--table", type=click.Path(dir_okay=False), default=None, help="Delimited timing table.")
@common_options
def bench(sizes, repeats, modes, kernels, seed, out, table):
    """Wall-clock fit times per problem size and mode."""
    from sifa.bench import parse_size, time_fits, time_kernels

    mode_list = [m.strip() for m in modes.split(",") if m.strip()]
    for m in mode_list:
        if m not in ("orthogonal", "general"):
            raise CliError(f"unknown mode {m!r}")
    parsed = [parse_size(s) for s in sizes]
    rows = time_fits(parsed, tuple(mode_list), repeats, seed=seed)
    doc = {"schema": sio.BENCH_SCHEMA, "repeats": repeats, "fits": [r.to_dict() for r in rows]}
    if kernels:
        doc["kernels"] = time_kernels(seed=seed)
    header = ["n", "dims", "q", "entries", "mode", "mean_seconds", "sd_seconds", "min_seconds", "iterations"]
    lines = []
    for r in rows:
        d = r.to_dict()
        lines.append([r.n, "x".join(map(str, r.dims)), r.q, r.entries, r.mode,
                      f"{d['mean_seconds']:.4f}", f"{d['sd_seconds']:.4f}", f"{d['min_seconds']:.4f}",
                      r.iterations])
    if out:
        sio.write_json(out, doc)
    if table:
        delim = "\t" if Path(table).suffix.lower() in (".tsv", ".txt") else ","
        text = f"# {sio.BENCH_SCHEMA}\n" + delim.join(header) + "\n"
        text += "".join(delim.join(str(x) for x in ln) + "\n" for ln in lines)
        sio.atomic_write(table, text)
    click.echo("\t".join(header))
    for ln in lines:
        click.echo("\t".join(str(x) for x in ln))
    for k in doc.get("kernels", []):
        click.echo(f"kernel {k['kernel']} [{k['backend']}]: {k['seconds']:.5f} s")


def main(argv=None):
    cli.main(args=argv, prog_name="sifa")


if __name__ == "__main__":
    main()
