"""Synthetic data from the generative hierarchy and the model-comparison harness.

Three models are compared on each replicate: the joint model, a
survey-only baseline with spatially homogeneous prevalence, and the
joint machinery restricted to the death outcome alone. Generator
defaults are artifact choices sized to give prevalence near 5% and
death detection of order 1e-3 to 1e-2; they are not ground truth
from any study.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import expit, logit

from .core import DataError, SurveillancePanel, SurveyEstimates
from .graph import AdjacencyGraph, build_grid_adjacency
from .likelihoods import truncnorm_logpdf
from .sampler import SamplerConfig, run_chains, summarize

MODELS = ("proposed", "baseline", "single")
METRICS = ("cp_mean", "rmse_N", "rmse_lambda", "rel_mae_N")


@dataclass(frozen=True)
class ScenarioConfig:
    rows: int = 6
    cols: int = 6
    n_years: int = 5
    n_outcomes: int = 2
    # None means a survey row every year
    survey_years: tuple[int, ...] | None = None
    survey_se: float = 0.0025
    pop_min: int = 5_000
    pop_max: int = 50_000
    pop_growth: float = 0.005
    beta0_mu: float = 0.055
    beta1_mu: float = -0.001
    gamma: tuple[float, ...] = (0.15,)
    tau2_u: float = 0.1
    phi_u: float = 0.7
    sigma2_v: float = 0.01
    mu_k_start: tuple[float, ...] = (float(logit(0.15)), float(logit(0.004)))
    mu_k_slope: tuple[float, ...] = (0.05, 0.15)
    beta_k: tuple[float, ...] = (-0.1, 0.2)
    tau2_k: tuple[float, ...] = (0.05, 0.05)
    phi_k: tuple[float, ...] = (0.5, 0.5)
    sigma2_k: tuple[float, ...] = (0.01, 0.01)
    n_replicates: int = 20
    seed: int = 2024
    max_retries: int = 50
    # sampler settings used by the evaluation harness
    iterations: int = 3000
    burnin: int = 1500
    thin: int = 1
    chains: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise DataError("grid needs at least two regions")
        if self.n_years < 2:
            raise DataError("need at least two years")
        if self.n_outcomes < 1:
            raise DataError("need at least one outcome")
        years = self.years_surveyed
        if len(set(years)) < 2:
            raise DataError("survey_years needs at least two distinct years to identify the trend")
        if self.survey_se <= 0:
            raise DataError("survey_se must be positive")
        if not 0 < self.pop_min <= self.pop_max:
            raise DataError("need 0 < pop_min <= pop_max")
        for name in ("mu_k_start", "mu_k_slope", "beta_k", "tau2_k", "phi_k", "sigma2_k"):
            if len(getattr(self, name)) != self.n_outcomes:
                raise DataError(f"{name} needs one value per outcome")
        for name in ("tau2_u", "sigma2_v"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be non-negative")
        if any(x < 0 for x in self.tau2_k + self.sigma2_k):
            raise DataError("variances must be non-negative")
        if not all(0 <= x < 1 for x in self.phi_k + (self.phi_u,)):
            raise DataError("temporal correlations must lie in [0, 1)")
        if self.n_replicates < 1 or self.max_retries < 1:
            raise DataError("n_replicates and max_retries must be positive")
        try:
            SamplerConfig(n_iterations=self.iterations, n_burnin=self.burnin, thin=self.thin,
                          n_chains=self.chains)
        except ValueError as e:
            raise DataError(str(e)) from None

    @property
    def years_surveyed(self) -> tuple[int, ...]:
        if self.survey_years is None:
            return tuple(range(1, self.n_years + 1))
        return tuple(sorted(set(self.survey_years)))

    @property
    def scenario(self) -> str:
        return "yearly" if set(self.years_surveyed) >= set(range(1, self.n_years + 1)) else "sparse"

    def true_mu_k(self) -> np.ndarray:
        t = np.arange(self.n_years)
        return np.array([a + b * t for a, b in zip(self.mu_k_start, self.mu_k_slope)])

    def true_mu(self) -> np.ndarray:
        return self.beta0_mu + self.beta1_mu * np.arange(1, self.n_years + 1)

    def sampler_config(self, seed: int) -> SamplerConfig:
        return SamplerConfig(n_iterations=self.iterations, n_burnin=self.burnin, thin=self.thin,
                             n_chains=self.chains, rng_seed=seed)

    # -- key=value files -----------------------------------------------------

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ScenarioConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise DataError(f"unknown scenario key {key!r}")
            kwargs[key] = _parse_value(key, raw, cls.__dataclass_fields__[key].default)
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for key, val in asdict(self).items():
            if val is None:
                out[key] = "all"
            elif isinstance(val, (tuple, list)):
                out[key] = ",".join(repr(float(x)) if isinstance(x, float) else str(x) for x in val)
            else:
                out[key] = repr(val) if isinstance(val, float) else str(val)
        return out


def _parse_value(key, raw, default):
    raw = raw.strip()
    if key == "survey_years":
        if raw.lower() in ("all", "", "none"):
            return None
        return tuple(int(x) for x in raw.replace("{", "").replace("}", "").split(",") if x.strip())
    try:
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise DataError(f"cannot parse {key}={raw!r}") from None


@dataclass
class SimulatedTruth:
    N: np.ndarray
    lam: np.ndarray
    p: np.ndarray  # (K, n, T)
    u: np.ndarray
    v: np.ndarray
    f: np.ndarray
    eps: np.ndarray
    mu: np.ndarray
    mu_k: np.ndarray
    beta0_mu: float
    beta1_mu: float


# --------------------------------------------------------------------------
# generator


def _icar_sampler(graph: AdjacencyGraph):
    """Return a function drawing centered ICAR(1) vectors via the precision eigenbasis."""
    vals, vecs = np.linalg.eigh(graph.precision_structure())
    keep = vals > 1e-9 * vals.max()
    basis = vecs[:, keep] / np.sqrt(vals[keep])

    def draw(rng, tau2):
        return math.sqrt(tau2) * (basis @ rng.standard_normal(basis.shape[1]))

    return draw


def simulate_dataset(config: ScenarioConfig, seed, graph: AdjacencyGraph | None = None):
    """Forward-simulate one data set.

    Returns ``(panel, survey, truth, graph)``. Fields are built slice by
    slice; a slice whose latent rate leaves (0, 1) is redrawn up to
    ``config.max_retries`` times.
    """
    rng = np.random.default_rng(seed)
    if graph is None:
        graph = build_grid_adjacency(config.rows, config.cols)
    n, T, K = graph.n_regions, config.n_years, config.n_outcomes
    draw_icar = _icar_sampler(graph)

    base = np.exp(rng.uniform(math.log(config.pop_min), math.log(config.pop_max), size=n))
    P = np.rint(base[:, None] * (1.0 + config.pop_growth) ** np.arange(T)[None, :]).astype(np.int64)
    P = np.maximum(P, 1)
    gamma = np.asarray(config.gamma, dtype=float)
    W = rng.standard_normal((n, T, len(gamma)))
    X = [rng.standard_normal((n, T, 1)) for _ in range(K)]
    mu = config.true_mu()
    if np.any((mu <= 0) | (mu >= 1)):
        raise DataError("generator statewide trend leaves (0, 1)")

    u = np.zeros((n, T))
    v = np.zeros((n, T))
    for t in range(T):
        for attempt in range(config.max_retries):
            prev = config.phi_u * u[:, t - 1] if t > 0 else 0.0
            ut = prev + draw_icar(rng, config.tau2_u)
            ut -= ut.mean()
            vt = math.sqrt(config.sigma2_v) * rng.standard_normal(n)
            rate = mu[t] * np.exp(W[:, t] @ gamma + ut + vt)
            if np.all((rate > 0) & (rate < 1)):
                u[:, t], v[:, t] = ut, vt
                break
        else:
            raise DataError(f"latent rate left (0, 1) in year {t + 1} after {config.max_retries} redraws")
    lam = np.exp(W @ gamma + u + v)

    f = np.zeros((K, n, T))
    for k in range(K):
        for t in range(T):
            prev = config.phi_k[k] * f[k, :, t - 1] if t > 0 else 0.0
            f[k, :, t] = prev + draw_icar(rng, config.tau2_k[k])
            f[k, :, t] -= f[k, :, t].mean()
    eps = np.sqrt(np.asarray(config.sigma2_k))[:, None, None] * rng.standard_normal((K, n, T))
    mu_k = config.true_mu_k()
    beta_k = np.asarray(config.beta_k, dtype=float)
    eta = mu_k[:, None, :] + f + eps + np.stack([X[k][:, :, 0] * beta_k[k] for k in range(K)])
    p = expit(eta)

    N = rng.binomial(P, mu[None, :] * lam)
    Y = rng.binomial(N[None], p)

    years = config.years_surveyed
    rows = []
    for t in years:
        m = config.beta0_mu + config.beta1_mu * t
        while True:
            s = rng.normal(m, config.survey_se)
            if 0 < s < 1:
                break
        rows.append((t, t, s, config.survey_se))
    survey = SurveyEstimates.from_rows(rows)

    names = ("treatment", "deaths") if K == 2 else tuple(f"outcome{k + 1}" for k in range(K))
    panel = SurveillancePanel(
        region_ids=graph.labels,
        years=tuple(range(1, T + 1)),
        populations=P,
        outcome_names=names,
        counts=Y,
        censor_codes=None,
        X=tuple(X),
        x_names=tuple((f"x_{nm}",) for nm in names),
        W=W,
        w_names=tuple(f"w{j}" for j in range(len(gamma))),
    )
    truth = SimulatedTruth(N=N, lam=lam, p=p, u=u, v=v, f=f, eps=eps, mu=mu, mu_k=mu_k,
                           beta0_mu=config.beta0_mu, beta1_mu=config.beta1_mu)
    return panel, survey, truth, graph


# --------------------------------------------------------------------------
# comparators


BETA0_STEP = 1e-4
BETA1_STEP = 1e-5


def fit_survey_trend(survey: SurveyEstimates, half_width: int = 60) -> tuple[float, float]:
    """Maximize the survey likelihood over an aligned grid in ``(beta0, beta1)``.

    The grid is centered on the weighted least-squares line and refined
    around the best point until the maximum is interior.
    """
    if len(survey) < 2:
        raise DataError("baseline needs at least two survey rows")
    survey.check_identifiable()
    x = survey.time_coefficient
    w = 1.0 / survey.se ** 2
    A = np.stack([np.ones_like(x), x], axis=1)
    b0, b1 = np.linalg.solve(A.T @ (A * w[:, None]), A.T @ (w * survey.estimate))
    for _ in range(50):
        g0 = (np.round(b0 / BETA0_STEP) + np.arange(-half_width, half_width + 1)) * BETA0_STEP
        g1 = (np.round(b1 / BETA1_STEP) + np.arange(-half_width, half_width + 1)) * BETA1_STEP
        B0, B1 = np.meshgrid(g0, g1, indexing="ij")
        means = B0[..., None] + B1[..., None] * x
        ll = _survey_grid_loglik(survey, means)
        i, j = np.unravel_index(np.nanargmax(ll), ll.shape)
        b0, b1 = g0[i], g1[j]
        if 0 < i < len(g0) - 1 and 0 < j < len(g1) - 1:
            break
    return float(b0), float(b1)


def _survey_grid_loglik(survey, means):
    return truncnorm_logpdf(survey.estimate, means, survey.se, 0.0, 1.0).sum(axis=-1)


def baseline_estimate(survey: SurveyEstimates, populations: np.ndarray):
    """Spatially homogeneous estimate ``N_it = mu_t * P_it`` from the survey alone.

    Returns ``(N_hat, mu_hat)``.
    """
    b0, b1 = fit_survey_trend(survey)
    T = populations.shape[1]
    mu_hat = b0 + b1 * np.arange(1, T + 1)
    return mu_hat[None, :] * populations, mu_hat


def fit_single_outcome(panel: SurveillancePanel, survey: SurveyEstimates, graph: AdjacencyGraph,
                       config: SamplerConfig, outcome: int | None = None):
    """Joint-model machinery on one outcome (the last one, deaths, by default)."""
    k = panel.n_outcomes - 1 if outcome is None else outcome
    return run_chains(panel.select_outcomes([k]), survey, graph, config)


# --------------------------------------------------------------------------
# scoring


def score(truth_N, truth_lam, N_hat, lam_hat, N_lower=None, N_upper=None) -> dict[str, float]:
    """CP, RMSE(N), RMSE(lambda) and relative median absolute error of N.

    CP is NaN when no interval is supplied.
    """
    truth_N = np.asarray(truth_N, dtype=float).ravel()
    N_hat = np.asarray(N_hat, dtype=float).ravel()
    out = {}
    if N_lower is None or N_upper is None:
        out["cp_mean"] = float("nan")
    else:
        lo = np.asarray(N_lower, dtype=float).ravel()
        hi = np.asarray(N_upper, dtype=float).ravel()
        out["cp_mean"] = float(np.mean((truth_N >= lo) & (truth_N <= hi)))
    out["rmse_N"] = float(np.sqrt(np.mean((N_hat - truth_N) ** 2)))
    lam = np.asarray(truth_lam, dtype=float).ravel()
    out["rmse_lambda"] = float(np.sqrt(np.mean((np.asarray(lam_hat, dtype=float).ravel() - lam) ** 2)))
    out["rel_mae_N"] = float(np.median(np.abs(N_hat - truth_N) / np.maximum(truth_N, 1.0)))
    return out


def _model_fit_scores(chains, panel, truth):
    summ = summarize(chains)
    regs, yrs = panel.region_ids, panel.years
    nN = [f"N[{r},{y}]" for r in regs for y in yrs]
    nL = [f"lambda[{r},{y}]" for r in regs for y in yrs]
    shape = truth.N.shape
    return summ, score(truth.N, truth.lam, summ.column(nN).reshape(shape), summ.column(nL).reshape(shape),
                       summ.column(nN, "lower").reshape(shape), summ.column(nN, "upper").reshape(shape))


def _intercept_coverage(summ, panel, truth) -> dict[str, float]:
    out = {}
    for name, val in (("beta_mu[0]", truth.beta0_mu), ("beta_mu[1]", truth.beta1_mu)):
        s = summ[name]
        out[f"covers_{name}"] = float(s["lower"] <= val <= s["upper"])
    for k, oname in enumerate(panel.outcome_names):
        kk = k if panel.n_outcomes == truth.mu_k.shape[0] else truth.mu_k.shape[0] - 1
        names = [f"mu_k[{oname},{y}]" for y in panel.years]
        lo, hi = summ.column(names, "lower"), summ.column(names, "upper")
        out[f"covers_mu_k[{oname}]"] = float(np.mean((truth.mu_k[kk] >= lo) & (truth.mu_k[kk] <= hi)))
    return out


def replicate_seeds(seed: int, replicate: int) -> tuple[int, int, int]:
    """Deterministic (data, joint fit, single fit) seeds for one replicate."""
    ss = np.random.SeedSequence([seed, replicate])
    a, b, c = ss.generate_state(3)
    return int(a), int(b) % 2**31, int(c) % 2**31


def run_replicate(config: ScenarioConfig, replicate: int) -> list[tuple]:
    """All three models on one simulated data set; returns long-format report rows."""
    data_seed, fit_seed, single_seed = replicate_seeds(config.seed, replicate)
    panel, survey, truth, graph = simulate_dataset(config, data_seed)
    scen = config.scenario
    rows = []

    N_b, _ = baseline_estimate(survey, panel.populations)
    for metric, val in score(truth.N, truth.lam, N_b, np.ones_like(truth.lam)).items():
        rows.append((replicate, scen, "baseline", metric, val))

    chains = run_chains(panel, survey, graph, config.sampler_config(fit_seed))
    summ, sc = _model_fit_scores(chains, panel, truth)
    sc.update(_intercept_coverage(summ, panel, truth))
    for metric, val in sc.items():
        rows.append((replicate, scen, "proposed", metric, val))

    chains = fit_single_outcome(panel, survey, graph, config.sampler_config(single_seed))
    single_panel = panel.select_outcomes([panel.n_outcomes - 1])
    _, sc = _model_fit_scores(chains, single_panel, truth)
    for metric, val in sc.items():
        rows.append((replicate, scen, "single", metric, val))
    return rows


def _run_replicate_job(args):
    return run_replicate(*args)


def evaluate(config: ScenarioConfig, progress=None) -> list[tuple]:
    """Run every replicate; rows are ``(replicate, scenario, model, metric, value)``."""
    jobs = [(config, r) for r in range(config.n_replicates)]
    rows = []
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            for out in ex.map(_run_replicate_job, jobs):
                rows += out
                if progress:
                    progress(out[0][0])
    else:
        for job in jobs:
            out = run_replicate(*job)
            rows += out
            if progress:
                progress(job[1])
    return rows


def aggregate(rows: list[tuple]) -> list[dict]:
    """Table-style summary: per model, mean/median of each metric and win counts vs the proposed model."""
    by = {}
    for rep, scen, model, metric, val in rows:
        by.setdefault((scen, model), {}).setdefault(metric, {})[rep] = val
    out = []
    for (scen, model), metrics in sorted(by.items(), key=lambda kv: (kv[0][0], MODELS.index(kv[0][1]))):
        rec = {"scenario": scen, "model": model, "replicates": len(next(iter(metrics.values())))}
        for metric in METRICS:
            vals = np.array(list(metrics.get(metric, {}).values()), dtype=float)
            rec[f"{metric}_mean"] = float(np.mean(vals)) if len(vals) else float("nan")
            rec[f"{metric}_median"] = float(np.median(vals)) if len(vals) else float("nan")
        prop = by.get((scen, "proposed"), {})
        for metric in METRICS[1:]:
            if model == "proposed" or metric not in prop:
                rec[f"proposed_wins_{metric}"] = ""
                continue
            mine = metrics.get(metric, {})
            rec[f"proposed_wins_{metric}"] = sum(1 for r, v in mine.items() if prop[metric].get(r, math.inf) < v)
        out.append(rec)
    return out
