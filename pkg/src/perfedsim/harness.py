"""Sweep configuration, trial execution, persistence, and comparison.

A sweep is a Cartesian grid over population and hyperparameter axes, a
fixed number of trials per cell, and a list of algorithms evaluated on the
same dataset draw. Rows land in a deterministic (cell, trial, algorithm)
order whatever the parallelism degree, so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import risk, theory
from .errors import IoError, ParseError, PerfedsimError
from .model import (ClientSpec, PopulationSpec, SpectralDistribution,
                    esd, expand_spectrum, generate_population)
from .numerics import RngStream, SpdFactor, substream

ALGORITHMS = ("ftfa", "rtfa", "maml", "pfedme", "fedavg", "naive", "naive-ridge")
AXIS_ORDER = ("m", "d", "gamma", "r", "sigma", "lambda", "alpha")
_NEEDS_LAMBDA = frozenset({"rtfa", "pfedme", "naive-ridge"})

CSV_HEADER = ["trial", "seed", "algorithm", "m", "d", "n", "gamma", "r", "sigma",
              "lambda", "alpha", "client_index", "bias", "variance", "risk",
              "theory_bias", "theory_variance", "theory_risk", "rel_err_risk",
              "status"]

_POP_KEYS = {"m", "d", "n", "gamma", "r", "sigma", "spectrum", "haar_basis",
             "weights", "theta0_norm", "cov_bound"}
_HYPER_KEYS = {"lambda", "alpha", "rounds", "sampled_users", "local_steps",
               "batch_size", "global_stepsize", "personal_stepsize",
               "personalization_steps", "pfedme_mixing", "hf_delta",
               "shared_batch", "init"}
_TOP_KEYS = {"population", "algorithms", "hypers", "sweep_axes", "trials",
             "master_seed"}


@dataclass(frozen=True)
class SweepConfig:
    population: PopulationSpec
    algorithms: tuple
    hypers: dict
    axes: dict  # axis name -> list of values, canonical AXIS_ORDER iteration
    trials: int = 1
    master_seed: int = 0


@dataclass
class ResultRow:
    trial: int
    seed: int
    algorithm: str
    m: int
    d: int
    n: int
    gamma: float
    r: float
    sigma: float
    lam: float | None
    alpha: float | None
    client_index: int
    bias: float
    variance: float
    risk: float
    theory_bias: float
    theory_variance: float
    theory_risk: float
    rel_err_risk: float
    status: str = "ok"


def rel_err(risk_value: float, theory_risk: float) -> float:
    return abs(risk_value - theory_risk) / max(theory_risk, 1e-12)


# ---------------------------------------------------------------------------
# config parsing

def _reject_unknown(mapping: dict, allowed: set, where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ParseError(f"unknown {where} keys: {sorted(unknown)}")


def parse_population(doc: dict) -> PopulationSpec:
    if not isinstance(doc, dict):
        raise ParseError("population must be a JSON object")
    _reject_unknown(doc, _POP_KEYS, "population")
    try:
        m = int(doc["m"])
        d = int(doc["d"])
    except KeyError as exc:
        raise ParseError(f"population is missing {exc}") from None
    if "n" in doc:
        n = int(doc["n"])
    elif "gamma" in doc:
        gamma = float(doc["gamma"])
        if gamma <= 0:
            raise ParseError("gamma must be positive")
        n = max(1, round(d / gamma))
    else:
        raise ParseError("population needs either n or gamma")
    spectrum = doc.get("spectrum")
    if isinstance(spectrum, dict):
        try:
            spectrum = {float(k): float(v) for k, v in spectrum.items()}
        except ValueError as exc:
            raise ParseError(f"bad spectrum entry: {exc}") from None
    template = ClientSpec(n=n, r=float(doc.get("r", 1.0)),
                          sigma=float(doc.get("sigma", 1.0)),
                          spectrum=spectrum,
                          haar_basis=bool(doc.get("haar_basis", False)))
    return PopulationSpec(m=m, d=d, template=template,
                          theta0_norm=float(doc.get("theta0_norm", 1.0)),
                          weight_scheme=str(doc.get("weights", "uniform")),
                          cov_bound=float(doc.get("cov_bound", 1e6)))


def parse_config(source) -> SweepConfig:
    """Parse a config document (dict, JSON text, or path); strict keys."""
    if isinstance(source, dict):
        doc = source
    else:
        text = source
        if not text.lstrip().startswith("{"):
            try:
                with open(text, encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                raise IoError(f"cannot read config: {exc}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError("config root must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "config")
    if "population" not in doc:
        raise ParseError("config is missing population")
    population = parse_population(doc["population"])
    algorithms = doc.get("algorithms", [])
    if not isinstance(algorithms, (list, tuple)) or not algorithms:
        raise ParseError("algorithms must be a nonempty list")
    for a in algorithms:
        if a not in ALGORITHMS:
            raise ParseError(f"unknown algorithm {a!r}; known: {list(ALGORITHMS)}")
    hypers = doc.get("hypers", {})
    if not isinstance(hypers, dict):
        raise ParseError("hypers must be an object")
    _reject_unknown(hypers, _HYPER_KEYS, "hypers")
    axes = doc.get("sweep_axes", None)
    if axes is not None:
        if not isinstance(axes, dict) or not axes:
            raise ParseError("sweep_axes must be a nonempty object when provided")
        _reject_unknown(axes, set(AXIS_ORDER), "sweep_axes")
        for name, values in axes.items():
            if not isinstance(values, (list, tuple)) or not values:
                raise ParseError(f"sweep axis {name!r} must be a nonempty list")
    else:
        axes = {}
    trials = int(doc.get("trials", 1))
    if trials < 1:
        raise ParseError("trials must be >= 1")
    cfg = SweepConfig(population=population, algorithms=tuple(algorithms),
                      hypers=dict(hypers), axes={k: list(v) for k, v in axes.items()},
                      trials=trials, master_seed=int(doc.get("master_seed", 0)))
    _check_hyper_coverage(cfg)
    return cfg


def _check_hyper_coverage(cfg: SweepConfig) -> None:
    have_lam = "lambda" in cfg.hypers or "lambda" in cfg.axes
    have_alpha = "alpha" in cfg.hypers or "alpha" in cfg.axes
    for a in cfg.algorithms:
        if a in _NEEDS_LAMBDA and not have_lam:
            raise ParseError(f"{a} requires lambda in hypers or sweep_axes")
        if a == "maml" and not have_alpha:
            raise ParseError("maml requires alpha in hypers or sweep_axes")


# ---------------------------------------------------------------------------
# theory pairing

def _nan_limit(algorithm: str) -> theory.TheoryLimit:
    nan = float("nan")
    return theory.TheoryLimit(algorithm, nan, nan, nan)


def _spectral_law(template: ClientSpec, d: int) -> SpectralDistribution:
    return esd(SpdFactor(expand_spectrum(template.spectrum, d)))


def theory_for(algorithm: str, population: PopulationSpec, lam: float | None,
               alpha: float | None) -> theory.TheoryLimit:
    """Pair an algorithm with its asymptotic prediction for this population.

    With identity covariance every algorithm has a closed form. With a
    general spectrum only the interpolating and ridge personalizers have
    predictions (meta-learning and proximal coupling share them through the
    equivalence limits); the rest get NaN rows.
    """
    template = population.template
    gamma = population.d / template.n
    r, sigma = template.r, template.sigma
    if template.spectrum is None:
        rho = math.sqrt(r * r + population.theta0_norm ** 2)
        if algorithm in ("ftfa", "maml"):
            base = theory.ftfa_limit(r, sigma, gamma)
        elif algorithm in ("rtfa", "pfedme"):
            base = theory.rtfa_limit(r, sigma, gamma, lam)
        elif algorithm == "fedavg":
            base = theory.fedavg_limit(r)
        elif algorithm == "naive":
            base = theory.naive_limit(rho, sigma, gamma)
        elif algorithm == "naive-ridge":
            base = theory.naive_ridge_limit(rho, sigma, gamma, lam)
        else:
            raise ParseError(f"unknown algorithm {algorithm!r}")
    else:
        h = _spectral_law(template, population.d)
        if algorithm in ("ftfa", "maml"):
            base = theory.ridgeless_limits_general(h, h, r, sigma, gamma)
        elif algorithm in ("rtfa", "pfedme"):
            base = theory.ridge_limits_general(h, h, r, sigma, gamma, lam)
        else:
            return _nan_limit(algorithm)
    return dataclasses.replace(base, algorithm=algorithm, alpha=alpha)


# ---------------------------------------------------------------------------
# trial execution

def _exact_risk(algorithm: str, ds, lam: float | None, alpha: float | None):
    if algorithm == "ftfa":
        return risk.exact_ftfa_risk(ds, 0)
    if algorithm == "rtfa":
        return risk.exact_rtfa_risk(ds, 0, lam)
    if algorithm == "maml":
        return risk.exact_maml_risk(ds, 0, alpha)
    if algorithm == "pfedme":
        return risk.exact_pfedme_risk(ds, 0, lam)
    if algorithm == "fedavg":
        return risk.exact_fedavg_risk(ds, 0)
    if algorithm == "naive":
        return risk.exact_naive_risks(ds.clients[0], client_index=0)
    if algorithm == "naive-ridge":
        return risk.exact_naive_risks(ds.clients[0], lam=lam, client_index=0)
    raise ParseError(f"unknown algorithm {algorithm!r}")


def run_trial(population: PopulationSpec, algorithms, hypers: dict,
              stream: RngStream) -> list:
    """One dataset draw, exact risk of client 0 per algorithm, theory-paired.

    A failing algorithm yields a flagged row rather than aborting the trial.
    """
    ds = generate_population(population, stream)
    template = population.template
    gamma = population.d / template.n
    lam = hypers.get("lambda")
    alpha = hypers.get("alpha")
    rows = []
    for algorithm in algorithms:
        row_lam = float(lam) if (algorithm in _NEEDS_LAMBDA and lam is not None) else None
        row_alpha = float(alpha) if (algorithm == "maml" and alpha is not None) else None
        nan = float("nan")
        try:
            limit = theory_for(algorithm, population, row_lam, row_alpha)
            report = _exact_risk(algorithm, ds, row_lam, row_alpha)
            rows.append(ResultRow(
                trial=0, seed=0, algorithm=algorithm, m=population.m,
                d=population.d, n=template.n, gamma=gamma, r=template.r,
                sigma=template.sigma, lam=row_lam, alpha=row_alpha,
                client_index=0, bias=report.bias, variance=report.variance,
                risk=report.risk, theory_bias=limit.bias,
                theory_variance=limit.variance, theory_risk=limit.risk,
                rel_err_risk=rel_err(report.risk, limit.risk)
                if math.isfinite(limit.risk) else nan))
        except PerfedsimError as exc:
            rows.append(ResultRow(
                trial=0, seed=0, algorithm=algorithm, m=population.m,
                d=population.d, n=template.n, gamma=gamma, r=template.r,
                sigma=template.sigma, lam=row_lam, alpha=row_alpha,
                client_index=0, bias=nan, variance=nan, risk=nan,
                theory_bias=nan, theory_variance=nan, theory_risk=nan,
                rel_err_risk=nan, status=f"failed:{type(exc).__name__}"))
    return rows


# ---------------------------------------------------------------------------
# sweeps

def _cells(cfg: SweepConfig) -> list:
    names = [name for name in AXIS_ORDER if name in cfg.axes]
    if not names:
        return [{}]
    return [dict(zip(names, combo))
            for combo in itertools.product(*(cfg.axes[name] for name in names))]


def _cell_population(cfg: SweepConfig, cell: dict) -> PopulationSpec:
    base = cfg.population
    template = base.template
    d = int(cell.get("d", base.d))
    gamma = float(cell["gamma"]) if "gamma" in cell else base.d / template.n
    n = max(1, round(d / gamma))
    template = replace(template, n=n, r=float(cell.get("r", template.r)),
                       sigma=float(cell.get("sigma", template.sigma)))
    return replace(base, m=int(cell.get("m", base.m)), d=d, template=template)


def _cell_hypers(cfg: SweepConfig, cell: dict) -> dict:
    hypers = dict(cfg.hypers)
    if "lambda" in cell:
        hypers["lambda"] = float(cell["lambda"])
    if "alpha" in cell:
        hypers["alpha"] = float(cell["alpha"])
    return hypers


def run_sweep(cfg: SweepConfig, jobs: int = 1) -> list:
    """All cells x trials; row order is deterministic for any jobs value."""
    cells = _cells(cfg)
    tasks = []
    for cell_index, cell in enumerate(cells):
        population = _cell_population(cfg, cell)
        hypers = _cell_hypers(cfg, cell)
        for t in range(cfg.trials):
            seed = cell_index * cfg.trials + t
            tasks.append((t, seed, population, hypers))

    def work(task):
        t, seed, population, hypers = task
        rows = run_trial(population, cfg.algorithms, hypers, substream(cfg.master_seed, seed))
        for row in rows:
            row.trial = t
            row.seed = seed
        return rows

    if jobs <= 1:
        chunks = [work(task) for task in tasks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(work, tasks))
    return [row for chunk in chunks for row in chunk]


# ---------------------------------------------------------------------------
# persistence

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow([_fmt(v) for v in (
            row.trial, row.seed, row.algorithm, row.m, row.d, row.n, row.gamma,
            row.r, row.sigma, row.lam, row.alpha, row.client_index, row.bias,
            row.variance, row.risk, row.theory_bias, row.theory_variance,
            row.theory_risk, row.rel_err_risk, row.status)])
    return buf.getvalue()


def write_rows(path: str, rows) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(rows_to_csv(rows))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def _parse_cell(value: str, caster):
    if value == "":
        return None
    try:
        return caster(value)
    except ValueError as exc:
        raise ParseError(f"bad field {value!r}: {exc}") from None


def rows_from_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty result file") from None
    if header != CSV_HEADER:
        raise ParseError(f"unexpected header {header}")
    rows = []
    for record in reader:
        if not record:
            continue
        if len(record) != len(CSV_HEADER):
            raise ParseError(f"row has {len(record)} fields, expected {len(CSV_HEADER)}")
        rows.append(ResultRow(
            trial=_parse_cell(record[0], int), seed=_parse_cell(record[1], int),
            algorithm=record[2], m=_parse_cell(record[3], int),
            d=_parse_cell(record[4], int), n=_parse_cell(record[5], int),
            gamma=_parse_cell(record[6], float), r=_parse_cell(record[7], float),
            sigma=_parse_cell(record[8], float), lam=_parse_cell(record[9], float),
            alpha=_parse_cell(record[10], float),
            client_index=_parse_cell(record[11], int),
            bias=_parse_cell(record[12], float), variance=_parse_cell(record[13], float),
            risk=_parse_cell(record[14], float),
            theory_bias=_parse_cell(record[15], float),
            theory_variance=_parse_cell(record[16], float),
            theory_risk=_parse_cell(record[17], float),
            rel_err_risk=_parse_cell(record[18], float), status=record[19]))
    if not rows:
        raise ParseError("result file has a header but no rows")
    return rows


def read_rows(path: str) -> list:
    try:
        with open(path, encoding="utf-8") as fh:
            return rows_from_csv(fh.read())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None


# ---------------------------------------------------------------------------
# comparison

def default_tolerance(d: int) -> float:
    if d < 400:
        return 0.15
    if d < 800:
        return 0.10
    return 0.07


def compare(path: str, tolerance: float | None = None):
    """Aggregate a result file into per-(algorithm, cell) quantiles.

    Returns (summary dict, human-readable table string). Cells without a
    finite theory prediction report null quantiles and do not affect the
    overall verdict.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    rows = rows_from_csv(raw.decode("utf-8"))
    config_hash = hashlib.sha256(raw).hexdigest()

    groups: dict = {}
    for row in rows:
        key = (row.algorithm, row.m, row.d, row.n, row.gamma, row.r, row.sigma,
               row.lam, row.alpha)
        groups.setdefault(key, []).append(row)

    cells = []
    verdicts = []
    for key in sorted(groups, key=_group_sort_key):
        algorithm, m, d, n, gamma, r, sigma, lam, alpha = key
        members = groups[key]
        errs = np.array([row.rel_err_risk for row in members
                         if row.status == "ok" and math.isfinite(row.rel_err_risk)])
        n_failed = sum(1 for row in members if row.status != "ok")
        tol = tolerance if tolerance is not None else default_tolerance(d)
        if errs.size:
            median = float(np.median(errs))
            q25, q75 = (float(q) for q in np.percentile(errs, [25, 75]))
            passed = bool(median <= tol)
            verdicts.append(passed)
        else:
            median = q25 = q75 = None
            passed = None
        cells.append({
            "algorithm": algorithm, "m": m, "d": d, "n": n, "gamma": gamma,
            "r": r, "sigma": sigma, "lambda": lam, "alpha": alpha,
            "rows": len(members), "failed": n_failed,
            "median_rel_err": median, "q25_rel_err": q25, "q75_rel_err": q75,
            "tolerance": tol, "passed": passed,
        })
    summary = {
        "config_hash": config_hash,
        "n_rows": len(rows),
        "cells": cells,
        "all_passed": all(verdicts) if verdicts else None,
    }
    return summary, _render_table(cells)


def _group_sort_key(key):
    algorithm, m, d, n, gamma, r, sigma, lam, alpha = key
    return (algorithm, m, d, n, gamma, r, sigma,
            -1.0 if lam is None else lam, -1.0 if alpha is None else alpha)


def _render_table(cells) -> str:
    header = (f"{'algorithm':<12}{'m':>6}{'d':>6}{'gamma':>8}{'r':>6}{'sigma':>7}"
              f"{'lambda':>8}{'alpha':>7}{'rows':>6}{'fail':>6}{'median':>10}"
              f"{'q25':>10}{'q75':>10}{'tol':>7}  verdict")
    lines = [header, "-" * len(header)]
    for c in cells:
        def num(v, width, prec=3):
            return f"{'':>{width}}" if v is None else f"{v:>{width}.{prec}g}"
        verdict = "-" if c["passed"] is None else ("PASS" if c["passed"] else "FAIL")
        lines.append(
            f"{c['algorithm']:<12}{c['m']:>6}{c['d']:>6}{c['gamma']:>8.3g}"
            f"{c['r']:>6.3g}{c['sigma']:>7.3g}{num(c['lambda'], 8)}{num(c['alpha'], 7)}"
            f"{c['rows']:>6}{c['failed']:>6}{num(c['median_rel_err'], 10)}"
            f"{num(c['q25_rel_err'], 10)}{num(c['q75_rel_err'], 10)}"
            f"{c['tolerance']:>7.3g}  {verdict}")
    return "\n".join(lines)
