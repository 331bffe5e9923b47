"""Command-line entry point: fit, simulate, evaluate, summarize.

Exit status is 0 on success, 1 when inputs or configuration fail
validation and 2 when a run fails after validation.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import AcsPanel, DataError, SurveillancePanel, SurveyEstimates
from .graph import AdjacencyGraph, GraphError, load_adjacency, write_adjacency
from .sampler import SamplerConfig, run_chains, split_rhat, summarize_draws
from .simulation import METRICS, ScenarioConfig, aggregate, baseline_estimate, evaluate, simulate_dataset

log = logging.getLogger("latentpop")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
ACS_LEAD_YEARS = 4


# --------------------------------------------------------------------------
# small file helpers


def read_key_value(path) -> dict[str, str]:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    out = {}
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e.strerror}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path.name} line {lineno}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise DataError(f"{path.name} line {lineno}: empty key")
        if key in out:
            raise DataError(f"{path.name} line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def write_key_value(path, values: dict[str, str]):
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {v}\n")


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def fmt(x) -> str:
    """Shortest text that reads back to the same float."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def _read_table(path, required: tuple[str, ...]):
    """Rows of a CSV as dicts, with their 1-based line numbers."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path.name}: missing columns {missing}")
        reader.fieldnames = header
        rows = [(reader.line_num, {k: (v or "").strip() for k, v in row.items() if k is not None})
                for row in reader]
    return path.name, rows


def _int(fname, lineno, col, raw):
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"{fname} line {lineno}: {col} must be an integer, got {raw!r}") from None


def _float(fname, lineno, col, raw):
    try:
        val = float(raw)
    except ValueError:
        raise DataError(f"{fname} line {lineno}: {col} must be a number, got {raw!r}") from None
    if not math.isfinite(val):
        raise DataError(f"{fname} line {lineno}: {col} must be finite")
    return val


def _check_id(fname, lineno, kind, val):
    if not val or "," in val or "[" in val or "]" in val:
        raise DataError(f"{fname} line {lineno}: {kind} {val!r} is empty or contains ',', '[' or ']'")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) if isinstance(x, (float, np.floating, int, np.integer)) and not isinstance(x, bool) else x
                        for x in row])


# --------------------------------------------------------------------------
# ingestion


def read_populations(path):
    """Return ``(region_ids, years, P)`` from a ``region_id, year, population`` CSV."""
    fname, rows = _read_table(path, ("region_id", "year", "population"))
    if not rows:
        raise DataError(f"{fname}: no rows")
    regions, years, vals = [], set(), {}
    for lineno, r in rows:
        rid = r["region_id"]
        _check_id(fname, lineno, "region_id", rid)
        y = _int(fname, lineno, "year", r["year"])
        p = _int(fname, lineno, "population", r["population"])
        if p <= 0:
            raise DataError(f"{fname} line {lineno}: population must be positive")
        if (rid, y) in vals:
            raise DataError(f"{fname} line {lineno}: duplicate row for region {rid!r}, year {y}")
        if rid not in vals and rid not in regions:
            regions.append(rid)
        years.add(y)
        vals[(rid, y)] = p
    years = sorted(years)
    if years != list(range(years[0], years[-1] + 1)):
        raise DataError(f"{fname}: years must be consecutive, got {years}")
    missing = [(r, y) for r in regions for y in years if (r, y) not in vals]
    if missing:
        raise DataError(f"{fname}: missing populations for {missing[:5]}{' ...' if len(missing) > 5 else ''}")
    P = np.array([[vals[(r, y)] for y in years] for r in regions], dtype=np.int64)
    return tuple(regions), tuple(years), P


def read_counts(path, regions, years, P, outcomes=None, censored_outcome=None):
    """Outcome counts with censoring codes.

    Returns ``(outcome_names, counts, censor_codes, censored_index)``.
    Fully suppressed cells store 0; cells with a suppressed adolescent
    component store the adult count.
    """
    fname, rows = _read_table(path, ("region_id", "year", "outcome_id", "count", "censor_code", "adult_count"))
    ridx = {r: i for i, r in enumerate(regions)}
    yidx = {y: t for t, y in enumerate(years)}
    cells = {}
    seen_outcomes = []
    for lineno, r in rows:
        rid, oid = r["region_id"], r["outcome_id"]
        if rid not in ridx:
            raise DataError(f"{fname} line {lineno}: unknown region id {rid!r}")
        y = _int(fname, lineno, "year", r["year"])
        if y not in yidx:
            raise DataError(f"{fname} line {lineno}: year {y} outside the population years")
        _check_id(fname, lineno, "outcome_id", oid)
        code = _int(fname, lineno, "censor_code", r["censor_code"] or "0")
        if code not in (0, 1, 2):
            raise DataError(f"{fname} line {lineno}: censor_code must be 0, 1 or 2, got {code}")
        if code == 0:
            if not r["count"]:
                raise DataError(f"{fname} line {lineno}: count is blank but censor_code is 0")
            stored = _int(fname, lineno, "count", r["count"])
        else:
            if r["count"]:
                raise DataError(f"{fname} line {lineno}: suppressed cell (censor_code {code}) must have a blank count")
            if code == 1:
                if not r["adult_count"]:
                    raise DataError(f"{fname} line {lineno}: censor_code 1 needs adult_count")
                stored = _int(fname, lineno, "adult_count", r["adult_count"])
            else:
                stored = 0
        if code != 1 and r["adult_count"]:
            raise DataError(f"{fname} line {lineno}: adult_count must be blank unless censor_code is 1")
        if stored < 0:
            raise DataError(f"{fname} line {lineno}: counts must be non-negative")
        i, t = ridx[rid], yidx[y]
        low = stored + 1 if code == 1 else (2 if code == 2 else stored)
        if low > P[i, t]:
            raise DataError(f"{fname} line {lineno}: count {low} exceeds population {P[i, t]} "
                            f"for region {rid!r}, year {y}")
        if (oid, i, t) in cells:
            raise DataError(f"{fname} line {lineno}: duplicate row for outcome {oid!r}, region {rid!r}, year {y}")
        if oid not in seen_outcomes:
            seen_outcomes.append(oid)
        cells[(oid, i, t)] = (stored, code)
    if outcomes:
        unknown = sorted(set(seen_outcomes) - set(outcomes))
        if unknown:
            raise DataError(f"{fname}: outcomes {unknown} not listed in the configuration")
        names = list(outcomes)
    else:
        names = seen_outcomes
    if not names:
        raise DataError(f"{fname}: no rows")
    n, T = P.shape
    counts = np.zeros((len(names), n, T), dtype=np.int64)
    codes = np.zeros((len(names), n, T), dtype=np.int64)
    missing = []
    for k, o in enumerate(names):
        for i in range(n):
            for t in range(T):
                if (o, i, t) not in cells:
                    missing.append((o, regions[i], years[t]))
                    continue
                counts[k, i, t], codes[k, i, t] = cells[(o, i, t)]
    if missing:
        raise DataError(f"{fname}: missing rows for {missing[:5]}{' ...' if len(missing) > 5 else ''}")
    censored = [k for k in range(len(names)) if codes[k].any()]
    if censored_outcome is not None:
        if censored_outcome not in names:
            raise DataError(f"censored outcome {censored_outcome!r} not among outcomes {names}")
        ck = names.index(censored_outcome)
        if any(k != ck for k in censored):
            raise DataError(f"{fname}: only outcome {censored_outcome!r} may carry nonzero censor codes")
    elif len(censored) > 1:
        raise DataError(f"{fname}: censoring is supported for a single outcome; found it in "
                        f"{[names[k] for k in censored]}")
    else:
        ck = censored[0] if censored else None
    return tuple(names), counts, (codes[ck] if ck is not None else None), ck


def read_survey(path, first_year):
    """Survey rows ``start_year, end_year, estimate, se`` (proportions) on the panel's time index."""
    fname, rows = _read_table(path, ("start_year", "end_year", "estimate", "se"))
    out = []
    for lineno, r in rows:
        a = _int(fname, lineno, "start_year", r["start_year"])
        b = _int(fname, lineno, "end_year", r["end_year"])
        s = _float(fname, lineno, "estimate", r["estimate"])
        se = _float(fname, lineno, "se", r["se"])
        if a > b:
            raise DataError(f"{fname} line {lineno}: start_year after end_year")
        if not 0 < s < 1:
            raise DataError(f"{fname} line {lineno}: estimate must be a proportion in (0, 1)")
        if se <= 0:
            raise DataError(f"{fname} line {lineno}: se must be positive")
        out.append((a - first_year + 1, b - first_year + 1, s, se))
    if not out:
        raise DataError(f"{fname}: no rows")
    return SurveyEstimates.from_rows(out)


def read_covariates(path, regions, years):
    """Covariate rows grouped by variable.

    Returns ``{variable: {"latent": bool, "rows": [(lineno, i, year, value, se, window)]}}``.
    Variables with standard errors are measured with error and become
    latent; the rest are taken as known.
    """
    fname, rows = _read_table(path, ("region_id", "year", "variable", "value", "se", "window"))
    ridx = {r: i for i, r in enumerate(regions)}
    out = {}
    for lineno, r in rows:
        rid, var = r["region_id"], r["variable"]
        if rid not in ridx:
            raise DataError(f"{fname} line {lineno}: unknown region id {rid!r}")
        _check_id(fname, lineno, "variable", var)
        y = _int(fname, lineno, "year", r["year"])
        val = _float(fname, lineno, "value", r["value"])
        window = _int(fname, lineno, "window", r["window"] or "1")
        if window not in (1, 5):
            raise DataError(f"{fname} line {lineno}: window must be 1 or 5")
        latent = bool(r["se"])
        se = _float(fname, lineno, "se", r["se"]) if latent else float("nan")
        if latent and se <= 0:
            raise DataError(f"{fname} line {lineno}: se must be positive")
        if not latent and window != 1:
            raise DataError(f"{fname} line {lineno}: known covariates (blank se) must use window 1")
        entry = out.setdefault(var, {"latent": latent, "rows": []})
        if entry["latent"] != latent:
            raise DataError(f"{fname} line {lineno}: variable {var!r} mixes rows with and without se")
        entry["rows"].append((lineno, ridx[rid], y, val, se, window))
    return fname, out


def _known_matrix(fname, var, entry, regions, years, allow_missing_years):
    n, T = len(regions), len(years)
    yidx = {y: t for t, y in enumerate(years)}
    M = np.full((n, T), np.nan)
    for lineno, i, y, val, _, _ in entry["rows"]:
        if y not in yidx:
            raise DataError(f"{fname} line {lineno}: year {y} outside the population years")
        if not np.isnan(M[i, yidx[y]]):
            raise DataError(f"{fname} line {lineno}: duplicate value of {var!r}")
        M[i, yidx[y]] = val
    have = ~np.isnan(M)
    active = have.any(axis=0) if allow_missing_years else np.ones(T, dtype=bool)
    gaps = np.argwhere(~have & active[None])
    if len(gaps):
        i, t = gaps[0]
        raise DataError(f"{fname}: covariate {var!r} missing for region {regions[i]!r}, year {years[t]}")
    return M, active


def _acs_arrays(fname, names, table, regions, years):
    n, T = len(regions), len(years)
    L = T + ACS_LEAD_YEARS
    first = years[0] - ACS_LEAD_YEARS
    J = len(names)
    est = {w: np.full((J, n, L), np.nan) for w in (1, 5)}
    se = {w: np.full((J, n, L), np.nan) for w in (1, 5)}
    for j, var in enumerate(names):
        for lineno, i, y, val, s, window in table[var]["rows"]:
            l = y - first
            if not 0 <= l < L:
                raise DataError(f"{fname} line {lineno}: year {y} outside {first}..{years[-1]}")
            if window == 5 and l < ACS_LEAD_YEARS:
                raise DataError(f"{fname} line {lineno}: 5-year estimate needs four earlier years (first allowed {years[0]})")
            if not 0 < val < 100:
                raise DataError(f"{fname} line {lineno}: percentage must lie in (0, 100)")
            if not np.isnan(est[window][j, i, l]):
                raise DataError(f"{fname} line {lineno}: duplicate {window}-year value of {var!r}")
            est[window][j, i, l] = val
            se[window][j, i, l] = s
    obs = np.concatenate([est[1].reshape(J, -1), est[5].reshape(J, -1)], axis=1)
    center = np.nanmean(obs, axis=1)
    scale = np.nanstd(obs, axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    return AcsPanel(tuple(names), 1 - ACS_LEAD_YEARS, est[1], se[1], est[5], se[5], center, scale)


def _split_list(raw):
    return [x.strip() for x in raw.split(",") if x.strip()] if raw else []


def resolve(cfg: dict, key: str, base: Path):
    val = cfg.get(key)
    if not val:
        return None
    p = Path(val)
    return p if p.is_absolute() else base / p


def load_fit_inputs(cfg: dict, base: Path):
    """Validate and join every fit input; returns ``(panel, survey, graph, input_paths)``."""
    paths = {k: resolve(cfg, k, base) for k in ("counts", "survey", "adjacency", "population", "covariates")}
    for k in ("counts", "survey", "adjacency", "population"):
        if paths[k] is None:
            raise DataError(f"missing required input {k!r}")
    regions, years, P = read_populations(paths["population"])
    try:
        with open(paths["adjacency"]) as fh:
            graph = load_adjacency(fh, labels=regions)
    except OSError as e:
        raise DataError(f"cannot read {paths['adjacency']}: {e.strerror}") from None
    outcomes = _split_list(cfg.get("outcomes", "")) or None
    names, counts, codes, ck = read_counts(paths["counts"], regions, years, P, outcomes,
                                           cfg.get("censored_outcome") or None)
    survey = read_survey(paths["survey"], years[0])

    X = [np.zeros((len(regions), len(years), 0)) for _ in names]
    x_names = [() for _ in names]
    W = np.zeros((len(regions), len(years), 0))
    w_mask = np.ones((len(years), 0), dtype=bool)
    w_names = ()
    acs = None
    declared = {k[len("detection_covariates."):]: _split_list(v) for k, v in cfg.items()
                if k.startswith("detection_covariates.")}
    for o in declared:
        if o not in names:
            raise DataError(f"detection covariates given for unknown outcome {o!r}")
    if paths["covariates"] is not None:
        fname, table = read_covariates(paths["covariates"], regions, years)
        det_vars = {v for vs in declared.values() for v in vs}
        if "risk_covariates" in cfg:
            risk_vars = _split_list(cfg["risk_covariates"])
        else:
            risk_vars = [v for v in table if v not in det_vars]
        for v in list(det_vars) + risk_vars:
            if v not in table:
                raise DataError(f"covariate {v!r} not found in {fname}")
        for o, vs in declared.items():
            k = names.index(o)
            mats = []
            for v in vs:
                if table[v]["latent"]:
                    raise DataError(f"detection covariate {v!r} has standard errors; only risk covariates may be latent")
                mats.append(_known_matrix(fname, v, table[v], regions, years, False)[0])
            X[k] = np.stack(mats, axis=2) if mats else X[k]
            x_names[k] = tuple(vs)
        known = [v for v in risk_vars if not table[v]["latent"]]
        latent = [v for v in risk_vars if table[v]["latent"]]
        if known:
            mats, masks = zip(*(_known_matrix(fname, v, table[v], regions, years, True) for v in known))
            W = np.stack([np.nan_to_num(m) for m in mats], axis=2)
            w_mask = np.stack(masks, axis=1)
            w_names = tuple(known)
        if latent:
            acs = _acs_arrays(fname, latent, table, regions, years)
    elif declared or cfg.get("risk_covariates"):
        raise DataError("covariate roles given but no covariates file")

    panel = SurveillancePanel(
        region_ids=regions, years=years, populations=P, outcome_names=names, counts=counts,
        censor_codes=codes, censored_outcome=ck, X=tuple(X), x_names=tuple(x_names),
        W=W, w_mask=w_mask, w_names=w_names, acs=acs,
    )
    return panel, survey, graph, {k: v for k, v in paths.items() if v is not None}


# --------------------------------------------------------------------------
# summaries shared by fit and summarize

_NAME = re.compile(r"^([A-Za-z_0-9]+)\[(.*)\]$")


def _parse_name(name):
    m = _NAME.match(name)
    if not m:
        return name, []
    return m.group(1), m.group(2).split(",")


def long_summary(names, chains, populations: dict, level=0.95):
    """Plot-ready rows ``(region, year, quantity, mean, sd, lower, upper)``.

    Cell quantities are N, prevalence (N / population), lambda and
    p_<outcome>; statewide series have a blank region; scalar parameters
    have blank region and year.
    """
    cols, labels = [], []
    extra_cols, extra_labels = [], []
    for q, name in enumerate(names):
        base, idx = _parse_name(name)
        if base in ("N", "lambda") and len(idx) == 2:
            labels.append((idx[0], idx[1], base))
            cols.append(q)
            if base == "N":
                pop = populations.get((idx[0], idx[1]))
                if pop is not None:
                    extra_cols.append((q, pop))
                    extra_labels.append((idx[0], idx[1], "prevalence"))
        elif base == "p" and len(idx) == 3:
            labels.append((idx[1], idx[2], f"p_{idx[0]}"))
            cols.append(q)
        elif base in ("mu", "omega_bar") and len(idx) >= 1:
            labels.append(("", idx[-1], base if len(idx) == 1 else f"{base}_{idx[0]}"))
            cols.append(q)
        elif base == "mu_k" and len(idx) == 2:
            labels.append(("", idx[1], f"mu_k_{idx[0]}"))
            cols.append(q)
        else:
            labels.append(("", "", name))
            cols.append(q)
    mats = [np.concatenate([c[:, cols], np.stack([c[:, q] / pop for q, pop in extra_cols], axis=1)
                            if extra_cols else np.zeros((len(c), 0))], axis=1) for c in chains]
    labels = labels + extra_labels
    summ = summarize_draws([f"{i}" for i in range(len(labels))], mats, level)
    rows = [(lab[0], lab[1], lab[2], summ.mean[j], summ.sd[j], summ.lower[j], summ.upper[j])
            for j, lab in enumerate(labels)]
    order = {"N": 0, "prevalence": 1, "lambda": 2}
    rows.sort(key=lambda r: (r[0] == "", r[0], r[1], order.get(r[2], 3), r[2]))
    return rows


LONG_HEADER = ("region", "year", "quantity", "mean", "sd", "lower", "upper")


def write_draws(path, names, draws):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(names)
        np.savetxt(fh, draws, delimiter=",", fmt="%.17g")


def read_draws(path):
    path = Path(path)
    try:
        with open(path) as fh:
            header = next(csv.reader([fh.readline()]), [])
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
    except (OSError, ValueError) as e:
        raise DataError(f"corrupt draw file {path.name}: {e}") from None
    if not header or header == [""] or data.size == 0:
        raise DataError(f"draw file {path.name} has no draws")
    if data.shape[1] != len(header):
        raise DataError(f"draw file {path.name}: {data.shape[1]} columns but {len(header)} names")
    return header, data


def write_manifest(out: Path, command, config, seed, inputs=None, extra=None, started=None):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {k: {"path": str(p), "sha256": sha256_of(p)} for k, p in (inputs or {}).items()},
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


# --------------------------------------------------------------------------
# subcommands

SAMPLER_KEYS = {"iterations": "n_iterations", "burnin": "n_burnin", "thin": "thin", "chains": "n_chains",
                "workers": "workers", "collapsed_moves": "collapsed_moves", "adapt_interval": "adapt_interval"}
FIT_KEYS = {"counts", "survey", "adjacency", "population", "covariates", "outcomes", "censored_outcome",
            "risk_covariates", "seed", "level"} | set(SAMPLER_KEYS)


def _load_config(args) -> tuple[dict, Path]:
    if args.config is None:
        return {}, Path.cwd()
    return read_key_value(args.config), Path(args.config).resolve().parent


def _override(cfg, args):
    for flag, key in (("seed", "seed"), ("iters", "iterations"), ("burnin", "burnin"),
                      ("thin", "thin"), ("chains", "chains")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = str(val)
    # --iters alone implies burn-in of half the iterations
    if getattr(args, "iters", None) is not None and getattr(args, "burnin", None) is None:
        cfg["burnin"] = str(args.iters // 2)
    return cfg


def _sampler_config(cfg) -> SamplerConfig:
    kw = {}
    for key, field in SAMPLER_KEYS.items():
        if key in cfg:
            raw = cfg[key]
            if field == "collapsed_moves":
                kw[field] = raw.lower() in ("1", "true", "yes")
            else:
                try:
                    kw[field] = int(raw)
                except ValueError:
                    raise DataError(f"{key} must be an integer, got {raw!r}") from None
    if "n_iterations" in kw and "n_burnin" not in kw:
        kw["n_burnin"] = kw["n_iterations"] // 2
    try:
        kw["rng_seed"] = int(cfg.get("seed", 0))
    except ValueError:
        raise DataError(f"seed must be an integer, got {cfg['seed']!r}") from None
    try:
        return SamplerConfig(**kw)
    except ValueError as e:
        raise DataError(str(e)) from None


def cmd_fit(args) -> int:
    started = _now()
    cfg, base = _load_config(args)
    for key in ("counts", "survey", "adjacency", "population", "covariates"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = str(Path(val).resolve())
    cfg = _override(cfg, args)
    unknown = sorted(k for k in cfg if k not in FIT_KEYS and not k.startswith("detection_covariates."))
    if unknown:
        raise DataError(f"unknown configuration keys {unknown}")
    level = float(cfg.get("level", 0.95))
    if not 0 < level < 1:
        raise DataError("level must lie in (0, 1)")
    scfg = _sampler_config(cfg)
    panel, survey, graph, inputs = load_fit_inputs(cfg, base)
    survey.check_identifiable()
    out = _out_dir(args)

    log.info("fitting %d regions x %d years, %d outcome(s), %d chain(s) of %d iterations",
             panel.n_regions, panel.n_years, panel.n_outcomes, scfg.n_chains, scfg.n_iterations)
    try:
        chains = run_chains(panel, survey, graph, scfg)
    except DataError:
        raise
    except Exception as e:  # noqa: BLE001
        raise RuntimeFailure(f"sampler failed: {e}") from e

    names = chains[0].names
    draws_dir = out / "draws"
    draws_dir.mkdir(exist_ok=True)
    for c, ch in enumerate(chains):
        write_draws(draws_dir / f"chain_{c}.csv", names, ch.draws)
    pops = {(r, str(y)): float(panel.populations[i, t]) for i, r in enumerate(panel.region_ids)
            for t, y in enumerate(panel.years)}
    write_csv(out / "populations.csv", ("region_id", "year", "population"),
              [(r, y, int(panel.populations[i, t])) for i, r in enumerate(panel.region_ids)
               for t, y in enumerate(panel.years)])

    rows = long_summary(names, [c.draws for c in chains], pops, level)
    write_csv(out / "summary_long.csv", LONG_HEADER, rows)
    _write_cell_summary(out / "summary.csv", rows, panel, survey)

    rhat = split_rhat([c.draws for c in chains]) if len(chains[0].draws) >= 4 else np.full(len(names), np.nan)
    summ = summarize_draws(names, [c.draws for c in chains], level)
    write_csv(out / "diagnostics.csv", ("quantity", "mean", "sd", "lower", "upper", "ess", "rhat"),
              [(nm, summ.mean[q], summ.sd[q], summ.lower[q], summ.upper[q], summ.ess[q], rhat[q])
               for q, nm in enumerate(names)])
    write_csv(out / "acceptance.csv", ("chain", "block", "rate"),
              [(c, k, v) for c, ch in enumerate(chains) for k, v in sorted(ch.acceptance.items())])
    write_csv(out / "adaptation.csv", ("chain", "iteration", "block", "rate"),
              [(c, it, k, v) for c, ch in enumerate(chains) for it, k, v in ch.acceptance_log])
    write_csv(out / "trace.csv", ("chain", "iteration", "log_posterior"),
              [(c, it, lp) for c, ch in enumerate(chains) for it, lp in enumerate(ch.logpost)])
    write_manifest(out, "fit", dict(sorted(cfg.items())), scfg.rng_seed, inputs,
                   {"draws": {f"chain_{c}.csv": len(ch.draws) for c, ch in enumerate(chains)},
                    "level": level}, started)
    log.info("wrote %s", out)
    return EXIT_OK


def _write_cell_summary(path, long_rows, panel, survey):
    """Wide per-cell table with flags against the survey-only baseline."""
    _, mu_hat = baseline_estimate(survey, panel.populations)
    table = {}
    for region, year, qty, mean, sd, lo, hi in long_rows:
        if region:
            table.setdefault((region, year), {})[qty] = (mean, sd, lo, hi)
    qtys = ["N", "prevalence", "lambda"] + [f"p_{o}" for o in panel.outcome_names]
    header = ["region_id", "year", "population"]
    for q in qtys:
        header += [f"{q}_mean", f"{q}_sd", f"{q}_lower", f"{q}_upper"]
    header += ["baseline_prevalence", "above_baseline", "below_baseline"]
    rows = []
    for i, r in enumerate(panel.region_ids):
        for t, y in enumerate(panel.years):
            rec = table[(r, str(y))]
            row = [r, y, int(panel.populations[i, t])]
            for q in qtys:
                row += list(rec[q])
            _, _, lo, hi = rec["prevalence"]
            b = float(mu_hat[t])
            row += [b, int(lo > b), int(hi < b)]
            rows.append(row)
    write_csv(path, header, rows)


def _out_dir(args) -> Path:
    if args.out is None:
        raise DataError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenario(args) -> tuple[ScenarioConfig, dict]:
    cfg, _ = _load_config(args)
    cfg = _override(cfg, args)
    for key in ("replicates", "workers"):
        val = getattr(args, key, None)
        if val is not None:
            cfg["n_replicates" if key == "replicates" else key] = str(val)
    if "iterations" in cfg and "burnin" not in cfg:
        cfg["burnin"] = str(int(cfg["iterations"]) // 2)
    return ScenarioConfig.from_mapping(cfg), cfg


def cmd_simulate(args) -> int:
    started = _now()
    scen, _ = _scenario(args)
    out = _out_dir(args)
    panel, survey, truth, graph = simulate_dataset(scen, scen.seed)
    regs, yrs = panel.region_ids, panel.years
    write_csv(out / "population.csv", ("region_id", "year", "population"),
              [(r, y, int(panel.populations[i, t])) for i, r in enumerate(regs) for t, y in enumerate(yrs)])
    write_csv(out / "counts.csv", ("region_id", "year", "outcome_id", "count", "censor_code", "adult_count"),
              [(r, y, o, int(panel.counts[k, i, t]), 0, "") for k, o in enumerate(panel.outcome_names)
               for i, r in enumerate(regs) for t, y in enumerate(yrs)])
    write_csv(out / "survey.csv", ("start_year", "end_year", "estimate", "se"),
              [(yrs[0] + a - 1, yrs[0] + b - 1, s, se)
               for a, b, s, se in zip(survey.a, survey.b, survey.estimate, survey.se)])
    cov_rows = []
    for j, w in enumerate(panel.w_names):
        cov_rows += [(r, y, w, panel.W[i, t, j], "", 1) for i, r in enumerate(regs) for t, y in enumerate(yrs)]
    for k in range(panel.n_outcomes):
        for j, x in enumerate(panel.x_names[k]):
            cov_rows += [(r, y, x, panel.X[k][i, t, j], "", 1) for i, r in enumerate(regs) for t, y in enumerate(yrs)]
    write_csv(out / "covariates.csv", ("region_id", "year", "variable", "value", "se", "window"), cov_rows)
    with open(out / "adjacency.txt", "w") as fh:
        write_adjacency(graph, fh)
    truth_header = ["region_id", "year", "N", "lambda", "mu"] + [f"p_{o}" for o in panel.outcome_names]
    write_csv(out / "truth.csv", truth_header,
              [[r, y, int(truth.N[i, t]), truth.lam[i, t], truth.mu[t]]
               + [truth.p[k, i, t] for k in range(panel.n_outcomes)]
               for i, r in enumerate(regs) for t, y in enumerate(yrs)])
    write_csv(out / "truth_intercepts.csv", ("quantity", "value"),
              [("beta_mu[0]", truth.beta0_mu), ("beta_mu[1]", truth.beta1_mu)]
              + [(f"mu_k[{o},{y}]", truth.mu_k[k, t]) for k, o in enumerate(panel.outcome_names)
                 for t, y in enumerate(yrs)])
    fit_cfg = {
        "counts": "counts.csv", "survey": "survey.csv", "adjacency": "adjacency.txt",
        "population": "population.csv", "covariates": "covariates.csv",
        "outcomes": ",".join(panel.outcome_names),
        "risk_covariates": ",".join(panel.w_names),
    }
    for k, o in enumerate(panel.outcome_names):
        fit_cfg[f"detection_covariates.{o}"] = ",".join(panel.x_names[k])
    fit_cfg.update({"seed": str(scen.seed), "iterations": str(scen.iterations), "burnin": str(scen.burnin),
                    "thin": str(scen.thin), "chains": str(scen.chains)})
    write_key_value(out / "fit.cfg", fit_cfg)
    write_key_value(out / "scenario.cfg", scen.to_mapping())
    inputs = {"config": Path(args.config)} if args.config else {}
    write_manifest(out, "simulate", scen.to_mapping(), scen.seed, inputs, started=started)
    log.info("wrote simulated panel to %s", out)
    return EXIT_OK


REPORT_HEADER = ("replicate", "scenario", "model", "metric", "value")


def cmd_evaluate(args) -> int:
    started = _now()
    scen, _ = _scenario(args)
    out = _out_dir(args)
    log.info("evaluating %s scenario: %d replicates", scen.scenario, scen.n_replicates)
    try:
        rows = evaluate(scen, progress=lambda r: log.info("replicate %d done", r))
    except DataError:
        raise
    except Exception as e:  # noqa: BLE001
        raise RuntimeFailure(f"evaluation failed: {e}") from e
    write_csv(out / "report.csv", REPORT_HEADER, rows)
    agg = aggregate(rows)
    header = list(agg[0].keys()) if agg else []
    write_csv(out / "aggregate.csv", header, [[rec[h] for h in header] for rec in agg])
    inputs = {"config": Path(args.config)} if args.config else {}
    write_manifest(out, "evaluate", scen.to_mapping(), scen.seed, inputs,
                   {"metrics": list(METRICS), "scenario": scen.scenario}, started)
    return EXIT_OK


def cmd_summarize(args) -> int:
    started = _now()
    src = Path(args.draws)
    draws_dir = src / "draws" if (src / "draws").is_dir() else src
    files = sorted(draws_dir.glob("chain_*.csv"), key=lambda p: int(re.sub(r"\D", "", p.stem) or 0))
    if not files:
        raise DataError(f"no draw files (chain_*.csv) in {draws_dir}")
    names, chains = None, []
    for f in files:
        hdr, data = read_draws(f)
        if names is not None and hdr != names:
            raise DataError(f"draw file {f.name} has different columns from {files[0].name}")
        names = hdr
        chains.append(data[::args.thin or 1])
    pops = {}
    pop_file = src / "populations.csv"
    if pop_file.exists():
        fname, rows = _read_table(pop_file, ("region_id", "year", "population"))
        pops = {(r["region_id"], r["year"]): _float(fname, ln, "population", r["population"]) for ln, r in rows}
    level = float(args.level)
    rows = long_summary(names, chains, pops, level)
    out = _out_dir(args)
    write_csv(out / "summary_long.csv", LONG_HEADER, rows)
    write_manifest(out, "summarize", {"thin": args.thin or 1, "level": level}, None,
                   {f.name: f for f in files},
                   {"draws": {f.name: len(c) for f, c in zip(files, chains)}}, started)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


class RuntimeFailure(RuntimeError):
    """A run that passed validation but failed while executing."""


def _common(p, seed=True, sampler=True):
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    if seed:
        p.add_argument("--seed", type=int, help="master seed; chains and replicates derive from it")
    if sampler:
        p.add_argument("--chains", type=int)
        p.add_argument("--iters", type=int, help="iterations per chain")
        p.add_argument("--burnin", type=int)
        p.add_argument("--thin", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentpop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the model to a panel of county counts")
    _common(p)
    for name in ("counts", "survey", "adjacency", "population", "covariates"):
        p.add_argument(f"--{name}", help=f"{name} file (overrides the config)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="write one synthetic data set")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="run the simulation study and write report CSVs")
    _common(p)
    p.add_argument("--replicates", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("summarize", help="recompute summaries from saved draws")
    _common(p, seed=False, sampler=False)
    p.add_argument("draws", help="fit output directory or a directory of chain_*.csv files")
    p.add_argument("--thin", type=int, help="keep every k-th saved draw")
    p.add_argument("--level", type=float, default=0.95)
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    for flag in ("chains", "iters", "thin", "replicates", "workers"):
        val = getattr(args, flag, None)
        if val is not None and val < 1:
            log.error("--%s must be a positive integer", flag)
            return EXIT_INVALID
    try:
        return args.func(args)
    except (DataError, GraphError) as e:
        log.error("%s", e)
        return EXIT_INVALID
    except RuntimeFailure as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        log.error("run failed: %s: %s", type(e).__name__, e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
